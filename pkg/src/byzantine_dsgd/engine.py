"""Synchronous Byzantine-resilient decentralized SGD.

A round has three phases separated by barriers: honest agents take a local
SGD half-step and send it to their honest neighbours; Byzantine agents,
having seen those half-steps, send one crafted vector per honest
neighbour; every honest agent aggregates its own half-step with what it
received. All randomness is keyed by ``(seed, agent, step)`` and agents are
processed in ascending id order, so a run is deterministic.
"""

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from byzantine_dsgd.agents import ByzantineAgent, HonestAgent
from byzantine_dsgd.aggregation import resolve_parameter
from byzantine_dsgd.analysis import disagreement
from byzantine_dsgd.config import config_hash
from byzantine_dsgd.errors import (
    DisconnectedHonestSubgraph,
    NonFiniteModel,
    SimulationError,
    TooFewInputs,
)
from byzantine_dsgd.learner import (
    STREAM_VICTIM,
    Dataset,
    GeneratorSpec,
    LocalDataset,
    classes_of,
    estimate_M_L,
    evaluate,
    init_params,
    keyed_rng,
    load_idx,
    partition,
    sample_indices,
    stack_datasets,
    step_size,
    synth_dataset,
)
from byzantine_dsgd.messaging import RoundBroker
from byzantine_dsgd.metrics import DISAGREEMENT, ROUND_COUNT, ROUND_DURATION, RUN_COUNT
from byzantine_dsgd.models import AttackSpec, LossSpec, PerturbSpec, RunConfig, ScheduleSpec
from byzantine_dsgd.sim_models import (
    PairResult,
    RunTrace,
    StabilityRecord,
    StabilityTrace,
    SweepResult,
    TraceRecord,
)
from byzantine_dsgd.topology import (
    Graph,
    RoleAssignment,
    baseline_weights,
    complete_graph,
    gen_erdos_renyi,
    honest_subgraph_connected,
)

logger = logging.getLogger(__name__)

L_PROBES = 8
L_PROBE_SAMPLES = 512


class Problem(BaseModel):
    """Everything shared by the two runs of a pair."""

    graph: Graph
    roles: RoleAssignment
    datasets: Dict[int, LocalDataset]
    test: Dataset
    loss: LossSpec
    schedule: ScheduleSpec
    weights: Dict[int, Dict[int, float]]
    x0: np.ndarray
    victim: Optional[int] = None
    generator: Optional[GeneratorSpec] = None

    class Config:
        arbitrary_types_allowed = True

    def with_replacement(self, agent: int, j: int, replacement_index: int) -> "Problem":
        """Copy whose agent ``agent`` has sample ``j`` replaced by a test sample."""
        if agent not in self.datasets:
            raise ValueError(f"agent {agent} is not honest")
        if not 0 <= replacement_index < len(self.test):
            raise ValueError(f"replacement index {replacement_index} outside the test set")
        datasets = dict(self.datasets)
        datasets[agent] = datasets[agent].replace(j, self.test.sample(replacement_index))
        return self.copy(update={"datasets": datasets})


class SimulationState(BaseModel):
    k: int
    models: Dict[int, np.ndarray]

    class Config:
        arbitrary_types_allowed = True


def build_graph(cfg: RunConfig) -> Graph:
    n = cfg.graph.n_agents
    if cfg.graph.kind == "complete":
        return complete_graph(n)
    seed = cfg.graph.seed if cfg.graph.seed is not None else cfg.seed
    return gen_erdos_renyi(n, cfg.graph.p, seed)


def build_roles(cfg: RunConfig) -> RoleAssignment:
    n = cfg.graph.n_agents
    if cfg.byzantine.ids is not None:
        return RoleAssignment.from_byzantine(n, cfg.byzantine.ids)
    seed = cfg.byzantine.seed if cfg.byzantine.seed is not None else cfg.seed
    return RoleAssignment.random(n, cfg.byzantine.count, seed)


def build_data(
    cfg: RunConfig, honest: List[int]
) -> Tuple[Dict[int, LocalDataset], Dataset, Optional[GeneratorSpec]]:
    spec = cfg.data
    seed = spec.seed if spec.seed is not None else cfg.seed
    if spec.source == "synthetic":
        locals_, test, generator = synth_dataset(
            spec.classes, spec.dim, spec.Z, len(honest), spec.test_count, seed,
            separation=spec.separation, agents=honest,
        )
        return {d.agent: d for d in locals_}, test, generator
    train = load_idx(spec.train_images, spec.train_labels)
    test = load_idx(spec.test_images, spec.test_labels)
    if len(test) > spec.test_count:
        test = test.subset(range(spec.test_count))
    return {d.agent: d for d in partition(train, honest, spec.Z, seed)}, test, None


def inbound_count(
    graph: Graph, roles: RoleAssignment, attack: AttackSpec, victim: Optional[int], n: int
) -> int:
    """Messages honest agent ``n`` receives each round, its own half-step excluded."""
    honest_nb = [m for m in graph.neighbors(n) if roles.is_honest(m)]
    byz_nb = len(graph.neighbors(n)) - len(honest_nb)
    if attack.kind == "none":
        byz_nb = 0
    elif attack.kind == "duplicate" and victim != n and victim not in honest_nb:
        byz_nb = 0
    return len(honest_nb) + byz_nb


def check_aggregation_inputs(
    cfg: RunConfig, graph: Graph, roles: RoleAssignment, victim: Optional[int]
) -> None:
    """Fail before the first round when an agent can never satisfy tm or ios."""
    rule = cfg.aggregation
    if rule.rule not in ("tm", "ios"):
        return
    for n in roles.honest:
        byz = sum(1 for m in graph.neighbors(n) if not roles.is_honest(m))
        param = int(resolve_parameter(rule, byz))
        received = inbound_count(graph, roles, cfg.attack, victim, n)
        if rule.rule == "tm" and received + 1 <= 2 * param:
            raise TooFewInputs(
                f"agent {n} aggregates {received + 1} inputs, too few for tm with b={param}"
            )
        if rule.rule == "ios" and param > 0 and param >= received:
            raise TooFewInputs(
                f"agent {n} receives {received} messages, too few for ios with q={param}"
            )


def build_problem(cfg: RunConfig) -> Problem:
    """Graph, roles, data, resolved loss and schedule, and the shared x0."""
    graph = build_graph(cfg)
    roles = build_roles(cfg)
    if not honest_subgraph_connected(graph, roles):
        raise DisconnectedHonestSubgraph(
            f"honest agents {roles.honest} do not form a connected subgraph"
        )
    honest = roles.honest

    victim = None
    if cfg.attack.kind == "duplicate":
        if cfg.attack.victim is not None:
            if not roles.is_honest(cfg.attack.victim):
                raise ValueError(f"victim {cfg.attack.victim} is not honest")
            victim = cfg.attack.victim
        else:
            victim = int(keyed_rng(cfg.seed, STREAM_VICTIM).choice(honest))
    check_aggregation_inputs(cfg, graph, roles, victim)

    datasets, test, generator = build_data(cfg, honest)
    first = datasets[honest[0]]
    if cfg.data.source == "synthetic":
        classes = cfg.data.classes
    else:
        classes = max(max(classes_of(d) for d in datasets.values()), classes_of(test))
    loss = cfg.loss.copy(update={"input_dim": first.dim, "classes": classes})

    schedule = cfg.schedule
    if schedule.kind == "sc" and schedule.mu is None:
        if loss.mu <= 0:
            raise ValueError("the sc schedule needs mu > 0: set schedule.mu or use the strongly_convex loss")
        schedule = schedule.copy(update={"mu": loss.mu})
    if schedule.kind == "ncvx" and schedule.L is None:
        probe = stack_datasets([datasets[n] for n in honest])
        probe = probe.subset(range(min(len(probe), L_PROBE_SAMPLES)))
        _, l_hat = estimate_M_L(loss, probe, L_PROBES, seed=cfg.seed)
        if l_hat <= 0:
            raise ValueError("estimated L is zero; set schedule.L")
        logger.info("estimated L=%.6g for the ncvx schedule", l_hat)
        schedule = schedule.copy(update={"L": l_hat})

    return Problem(
        graph=graph,
        roles=roles,
        datasets=datasets,
        test=test,
        loss=loss,
        schedule=schedule,
        weights=baseline_weights(graph, cfg.aggregation.weights),
        x0=init_params(loss, cfg.init, cfg.seed),
        victim=victim,
        generator=generator,
    )


class Simulation:
    """One run of the algorithm, advanced a round at a time."""

    def __init__(self, cfg: RunConfig, problem: Optional[Problem] = None) -> None:
        self.cfg = cfg
        self.problem = problem or build_problem(cfg)
        self.broker = RoundBroker()
        self.k = 0
        p = self.problem
        g, roles = p.graph, p.roles
        neighborhoods = {
            n: [m for m in g.neighbors(n) if roles.is_honest(m)] for n in roles.honest
        }
        self.honest = [
            HonestAgent(
                agent_id=n,
                broker=self.broker,
                neighbors=g.neighbors(n),
                honest_neighbors=neighborhoods[n],
                byzantine_neighbors=sum(1 for m in g.neighbors(n) if not roles.is_honest(m)),
                dataset=p.datasets[n],
                model=p.x0,
                weights=p.weights[n],
                rule=cfg.aggregation,
                loss=p.loss,
                seed=cfg.seed,
                batch_size=cfg.batch_size,
            )
            for n in roles.honest
        ]
        self.byzantine = [
            ByzantineAgent(
                agent_id=b,
                broker=self.broker,
                neighbors=g.neighbors(b),
                honest_neighborhoods=neighborhoods,
                attack=cfg.attack,
                seed=cfg.seed,
                dim=p.loss.param_count,
                victim=p.victim,
            )
            for b in roles.byzantine
        ]
        self._train = stack_datasets([p.datasets[n] for n in roles.honest])

    @property
    def models(self) -> Dict[int, np.ndarray]:
        return {a.agent_id: a.model for a in self.honest}

    @property
    def xbar(self) -> np.ndarray:
        return np.mean(np.stack([a.model for a in self.honest]), axis=0)

    def step(self) -> None:
        """Advance one synchronous round."""
        start = time.perf_counter()
        k = self.k
        alpha = step_size(self.problem.schedule, k)
        half_steps = {a.agent_id: a.half_step(k, alpha) for a in self.honest}
        for b in self.byzantine:
            b.emit(k, half_steps)
        for a in self.honest:
            x = a.aggregate(k)
            if not np.all(np.isfinite(x)):
                logger.error("agent %d diverged at step %d", a.agent_id, k)
                raise NonFiniteModel(k, a.agent_id)
        leftover = self.broker.pending()
        if leftover:
            logger.warning("%d messages undelivered after step %d", leftover, k)
        self.k = k + 1
        ROUND_COUNT.inc()
        ROUND_DURATION.observe(time.perf_counter() - start)

    def snapshot(self) -> SimulationState:
        return SimulationState(k=self.k, models={n: x.copy() for n, x in self.models.items()})

    def restore(self, state: SimulationState) -> None:
        for a in self.honest:
            a.model = state.models[a.agent_id].copy()
        self.k = state.k

    def record(self) -> TraceRecord:
        models = [a.model for a in self.honest]
        xbar = self.xbar
        loss = self.problem.loss
        train_loss, _ = evaluate(loss, xbar, self._train)
        test_loss, acc = evaluate(loss, xbar, self.problem.test)
        h = disagreement(models)
        DISAGREEMENT.set(h)
        return TraceRecord(
            k=self.k,
            xbar=xbar,
            H=h,
            avg_loss_train=train_loss,
            avg_loss_test=test_loss,
            acc_test=acc,
            norms={a.agent_id: float(np.linalg.norm(a.model)) for a in self.honest},
        )

    def should_record(self) -> bool:
        return self.k % self.cfg.record_every == 0 or self.k == self.cfg.steps

    def run(self) -> RunTrace:
        """Run to ``cfg.steps`` rounds, recording every ``record_every`` steps and at the end."""
        records = [self.record()] if self.should_record() else []
        while self.k < self.cfg.steps:
            self.step()
            if self.should_record():
                records.append(self.record())
                logger.debug("k=%d H=%.3e train=%.4f", self.k, records[-1].H, records[-1].avg_loss_train)
        return RunTrace(records=records)


def run(cfg: RunConfig, problem: Optional[Problem] = None) -> RunTrace:
    logger.info(
        "run: %d agents, %d Byzantine, rule=%s, attack=%s, K=%d, seed=%d",
        cfg.graph.n_agents, cfg.byzantine.count, cfg.aggregation.rule,
        cfg.attack.kind, cfg.steps, cfg.seed,
    )
    try:
        trace = Simulation(cfg, problem).run()
    except Exception:
        RUN_COUNT.labels(status="failed").inc()
        raise
    RUN_COUNT.labels(status="ok").inc()
    return trace


def _stability(a: Simulation, b: Simulation) -> StabilityRecord:
    diffs = [float(np.linalg.norm(x.model - y.model)) for x, y in zip(a.honest, b.honest)]
    return StabilityRecord(
        k=a.k,
        delta=float(np.linalg.norm(a.xbar - b.xbar)),
        eta=float(np.mean(diffs)),
    )


def default_perturb(
    problem: Problem,
    agent: Optional[int] = None,
    index: Optional[int] = None,
    replacement_index: Optional[int] = None,
) -> PerturbSpec:
    """Fill unset fields with the first honest agent, sample 0 and test sample 0."""
    return PerturbSpec(
        agent=problem.roles.honest[0] if agent is None else agent,
        index=0 if index is None else index,
        replacement_index=0 if replacement_index is None else replacement_index,
    )


def run_pair(
    cfg: RunConfig, perturb: Optional[PerturbSpec] = None, problem: Optional[Problem] = None
) -> Tuple[RunTrace, RunTrace, StabilityTrace]:
    """Two runs sharing all randomness on datasets differing in one sample.

    The second run replaces sample ``perturb.index`` of agent
    ``perturb.agent`` with test sample ``perturb.replacement_index``.
    """
    problem = problem or build_problem(cfg)
    perturb = perturb or default_perturb(problem)
    if not problem.roles.is_honest(perturb.agent):
        raise ValueError(f"perturbed agent {perturb.agent} is not honest")
    other = problem.with_replacement(perturb.agent, perturb.index, perturb.replacement_index)
    first, second = Simulation(cfg, problem), Simulation(cfg, other)
    logger.info(
        "pair: agent %d sample %d replaced, K=%d, seed=%d",
        perturb.agent, perturb.index, cfg.steps, cfg.seed,
    )
    rec_a: List[TraceRecord] = []
    rec_b: List[TraceRecord] = []
    stab: List[StabilityRecord] = []

    def capture() -> None:
        rec_a.append(first.record())
        rec_b.append(second.record())
        stab.append(_stability(first, second))

    capture()
    while first.k < cfg.steps:
        first.step()
        second.step()
        if first.should_record():
            capture()
    RUN_COUNT.labels(status="ok").inc(2)
    return RunTrace(records=rec_a), RunTrace(records=rec_b), StabilityTrace(records=stab)


def first_draw_step(
    seed: int, agent: int, index: int, Z: int, batch: int, max_steps: int
) -> Optional[int]:
    """First step at which ``agent`` samples position ``index``, if any before ``max_steps``."""
    for k in range(max_steps):
        if np.any(sample_indices(seed, agent, k, Z, batch) == index):
            return k
    return None


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_axis(base: RunConfig, axis: str, value: str, index: int) -> RunConfig:
    """Config for one sweep value; seeds are offset by position except on the seed axis."""
    update: Dict[str, Any] = {"seed": base.seed + index}
    if axis == "rule":
        update["aggregation"] = {"rule": value}
    elif axis == "attack":
        update["attack"] = {"kind": value}
    elif axis == "honest_count":
        update["graph"] = {"n_agents": int(value) + base.byzantine.count}
        update["byzantine"] = {"ids": None}
    elif axis == "Z":
        update["data"] = {"Z": int(value)}
    elif axis == "seed":
        update["seed"] = int(value)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return RunConfig.parse_obj(_merge(base.dict(), update))


def _sweep_one(
    base: RunConfig, axis: str, value: str, index: int, mode: str
) -> SweepResult:
    try:
        cfg = apply_axis(base, axis, value, index)
    except (ValidationError, ValueError) as e:
        logger.warning("sweep %s=%s: invalid config: %s", axis, value, e)
        return SweepResult(value=value, seed=base.seed + index, status="failed", error=str(e))
    digest = config_hash(cfg)
    try:
        if mode == "pair":
            first, second, stab = run_pair(cfg)
            return SweepResult(
                value=value, seed=cfg.seed, status="ok", config_hash=digest,
                trace=first, pair=PairResult(first=first, second=second, stability=stab),
            )
        return SweepResult(
            value=value, seed=cfg.seed, status="ok", config_hash=digest, trace=run(cfg)
        )
    except (SimulationError, ValueError) as e:
        logger.warning("sweep %s=%s failed: %s", axis, value, e)
        return SweepResult(
            value=value, seed=cfg.seed, status="failed", config_hash=digest, error=str(e)
        )


def sweep(
    base: RunConfig,
    axis: str,
    values: Sequence[str],
    mode: str = "run",
    workers: int = 1,
) -> List[SweepResult]:
    """Independent runs per axis value, returned in value order.

    A failing value is marked ``failed`` and the sweep continues.
    """
    values = [str(v) for v in values]
    if not values:
        return []
    if workers <= 1:
        return [_sweep_one(base, axis, v, i, mode) for i, v in enumerate(values)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(
            pool.map(lambda iv: _sweep_one(base, axis, iv[1], iv[0], mode), enumerate(values))
        )
