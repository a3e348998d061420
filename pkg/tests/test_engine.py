import numpy as np
import pytest

from byzantine_dsgd.engine import (
    Simulation,
    build_problem,
    first_draw_step,
    inbound_count,
    run,
    run_pair,
)
from byzantine_dsgd.errors import DisconnectedHonestSubgraph, NonFiniteModel, TooFewInputs
from byzantine_dsgd.learner import Dataset, sample_indices, step_size
from byzantine_dsgd.models import AttackSpec, PerturbSpec, RunConfig
from byzantine_dsgd.topology import Graph, RoleAssignment, baseline_weights


def _same(a, b):
    assert a.ks == b.ks
    for x, y in zip(a.records, b.records):
        assert np.array_equal(x.xbar, y.xbar)
        assert x.H == y.H
        assert x.avg_loss_train == y.avg_loss_train
        assert x.avg_loss_test == y.avg_loss_test


def test_build_problem_resolves_loss_and_schedule(make_config):
    """Test that the loss dimensions and sc step size come from the data and loss."""
    cfg = make_config(
        loss={"kind": "strongly_convex", "lam": 0.2}, schedule={"kind": "sc", "k0": 5.0}
    )
    problem = build_problem(cfg)
    assert problem.loss.input_dim == 4
    assert problem.loss.classes == 3
    assert problem.schedule.mu == pytest.approx(0.2)
    assert len(problem.roles.byzantine) == 1
    assert sorted(problem.datasets) == problem.roles.honest
    assert np.array_equal(problem.x0, np.zeros(problem.loss.param_count))


def test_ncvx_schedule_estimates_smoothness(make_config):
    problem = build_problem(make_config(schedule={"kind": "ncvx"}, loss={"kind": "mlp", "hidden": 4}))
    assert problem.schedule.L > 0


def test_sc_schedule_needs_strong_convexity(make_config):
    with pytest.raises(ValueError):
        build_problem(make_config(schedule={"kind": "sc"}))


def test_duplicate_victim_is_honest(make_config):
    problem = build_problem(make_config(attack={"kind": "duplicate"}))
    assert problem.victim in problem.roles.honest


def test_disconnected_honest_subgraph(make_config):
    cfg = make_config(graph={"kind": "erdos_renyi", "n_agents": 4, "p": 0.0}, byzantine={"count": 0})
    with pytest.raises(DisconnectedHonestSubgraph):
        run(cfg)


def test_recording_grid(small_config):
    """Test that steps 0, every stride and K are recorded."""
    trace = run(small_config.copy(update={"steps": 12}))
    assert trace.ks == [0, 5, 10, 12]
    first = trace.records[0]
    assert first.H == 0.0
    assert set(first.norms) == set(build_problem(small_config).roles.honest)


def test_runs_are_deterministic(small_config):
    _same(run(small_config), run(small_config))


def test_seed_changes_the_run(small_config):
    a = run(small_config)
    b = run(small_config.copy(update={"seed": 4}))
    assert not np.array_equal(a.records[-1].xbar, b.records[-1].xbar)


def test_exact_consensus_with_uniform_averaging(make_config):
    """Test that averaging everything on a complete graph keeps agents identical."""
    cfg = make_config(
        byzantine={"count": 0},
        aggregation={"rule": "mean", "weights": "uniform"},
        record_every=1,
    )
    sim = Simulation(cfg)
    for _ in range(cfg.steps):
        sim.step()
        models = list(sim.models.values())
        assert all(np.array_equal(models[0], m) for m in models[1:])
        assert sim.record().H < 1e-24


def test_identical_data_keeps_agents_together(make_config):
    """Test that agents with the same data and init stay together under Metropolis averaging."""
    cfg = make_config(byzantine={"count": 0}, aggregation={"rule": "mean", "weights": "metropolis"})
    problem = build_problem(cfg)
    shared = problem.datasets[0]
    datasets = {
        n: shared.copy(update={"agent": n}) for n in problem.datasets
    }
    sim = Simulation(cfg, problem.copy(update={"datasets": datasets}))
    for _ in range(cfg.steps):
        sim.step()
        models = list(sim.models.values())
        assert all(np.allclose(models[0], m, rtol=0, atol=1e-12) for m in models[1:])


def test_averaging_identity(make_config):
    """Test xbar(k+1) = xbar(k) - alpha_k * mean gradient with doubly stochastic weights."""
    cfg = make_config(byzantine={"count": 0}, aggregation={"rule": "mean", "weights": "metropolis"})
    ring = Graph(n_agents=5, edges=[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])
    problem = build_problem(cfg)
    problem = problem.copy(update={"graph": ring, "weights": baseline_weights(ring, "metropolis")})
    sim = Simulation(cfg, problem)
    for k in range(cfg.steps):
        before = sim.xbar
        alpha = step_size(problem.schedule, k)
        sim.step()
        grads = np.mean([a.last_gradient for a in sim.honest], axis=0)
        assert np.allclose(sim.xbar, before - alpha * grads, rtol=0, atol=1e-10)
        if k > 0:
            assert sim.record().H > 0


def test_snapshot_and_restore(small_config):
    """Test that resuming from a snapshot reproduces an uninterrupted run."""
    straight = Simulation(small_config)
    for _ in range(10):
        straight.step()

    first = Simulation(small_config)
    for _ in range(5):
        first.step()
    state = first.snapshot()
    resumed = Simulation(small_config)
    resumed.restore(state)
    for _ in range(5):
        resumed.step()

    assert resumed.k == straight.k == 10
    for n, x in straight.models.items():
        assert np.array_equal(x, resumed.models[n])


@pytest.mark.parametrize("attack", ["none", "gaussian", "duplicate", "alie", "signflip"])
@pytest.mark.parametrize("rule", ["mean", "tm", "ios", "scc"])
def test_every_rule_and_attack_runs(make_config, rule, attack):
    trace = run(make_config(aggregation={"rule": rule}, attack={"kind": attack}, steps=6))
    assert trace.ks == [0, 5, 6]
    assert all(np.all(np.isfinite(r.xbar)) for r in trace.records)


def test_divergence_is_reported(make_config):
    """Test that an exploding step size raises NonFiniteModel."""
    cfg = make_config(
        byzantine={"count": 0},
        aggregation={"rule": "mean"},
        loss={"kind": "strongly_convex"},
        schedule={"kind": "paper_exp", "s": 1e308},
        steps=5,
        record_every=100,
    )
    with np.errstate(all="ignore"):
        with pytest.raises(NonFiniteModel) as err:
            run(cfg)
    assert err.value.step < 5


def test_pair_with_identical_replacement_never_diverges(make_config):
    """Test that replacing a sample by an identical copy gives delta = 0 throughout."""
    cfg = make_config(record_every=1)
    problem = build_problem(cfg)
    agent = problem.roles.honest[0]
    local = problem.datasets[agent]
    j = 3
    same_test = Dataset(features=local.features[[j]].copy(), labels=local.labels[[j]].copy())
    problem = problem.copy(update={"test": same_test})
    _, _, stab = run_pair(cfg, PerturbSpec(agent=agent, index=j, replacement_index=0), problem)
    assert stab.ks == list(range(cfg.steps + 1))
    assert all(r.delta == 0.0 and r.eta == 0.0 for r in stab.records)


def test_pair_is_identical_before_the_first_draw(make_config):
    """Test that the two runs agree until the replaced sample is first drawn."""
    cfg = make_config(steps=60, record_every=1, batch_size=2, data={"Z": 50})
    problem = build_problem(cfg)
    agent = problem.roles.honest[0]
    perturb = PerturbSpec(agent=agent, index=7, replacement_index=0)
    first, second, stab = run_pair(cfg, perturb, problem)
    draw = first_draw_step(cfg.seed, agent, 7, 50, 2, cfg.steps)

    for r in stab.records:
        if draw is None or r.k <= draw:
            assert r.delta == 0.0
        assert r.delta <= r.eta + 1e-12 * max(1.0, r.eta)
    if draw is not None:
        assert stab.at(draw + 1).delta > 0.0
    assert first.ks == second.ks == stab.ks


def test_first_draw_step():
    k = first_draw_step(1, 0, 3, 10, 2, 500)
    assert k is not None
    assert 3 in sample_indices(1, 0, k, 10, 2)
    assert all(3 not in sample_indices(1, 0, i, 10, 2) for i in range(k))
    assert first_draw_step(1, 0, 3, 10, 2, 0) is None


def test_pair_rejects_byzantine_agent(small_config):
    problem = build_problem(small_config)
    byz = problem.roles.byzantine[0]
    with pytest.raises(ValueError):
        run_pair(small_config, PerturbSpec(agent=byz, index=0), problem)


def test_infeasible_trimming_fails_before_the_first_round():
    """Test that tm on a topology with a Byzantine-majority neighbourhood is rejected up front."""
    cfg = RunConfig(seed=229, aggregation={"rule": "tm"})
    with pytest.raises(TooFewInputs, match=r"agent \d+ aggregates \d+ inputs, too few for tm with b=2"):
        build_problem(cfg)


def test_silent_attackers_leave_ios_too_few_messages():
    cfg = RunConfig(seed=229, aggregation={"rule": "ios"}, attack={"kind": "none"})
    with pytest.raises(TooFewInputs, match=r"agent \d+ receives \d+ messages, too few for ios with q=\d"):
        build_problem(cfg)


def test_inbound_count_follows_the_attack():
    """Test how many messages an agent expects under each attack."""
    # honest 0-1-2 path, Byzantine 3 attached to 0 and 2
    g = Graph(n_agents=4, edges=[(0, 1), (1, 2), (0, 3), (2, 3)])
    roles = RoleAssignment.from_byzantine(4, [3])
    assert inbound_count(g, roles, AttackSpec(kind="signflip"), None, 0) == 2
    assert inbound_count(g, roles, AttackSpec(kind="none"), None, 0) == 1
    assert inbound_count(g, roles, AttackSpec(kind="duplicate"), 1, 0) == 2
    assert inbound_count(g, roles, AttackSpec(kind="duplicate"), 0, 0) == 2
    assert inbound_count(g, roles, AttackSpec(kind="duplicate"), 2, 0) == 1
    assert inbound_count(g, roles, AttackSpec(kind="signflip"), None, 1) == 2


def test_rounds_leave_no_undelivered_messages(small_config):
    sim = Simulation(small_config)
    for _ in range(3):
        sim.step()
        assert sim.broker.pending() == 0
