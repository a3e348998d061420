"""Configuration models for runs, attacks, losses and bound evaluation."""

import math
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Extra, Field, root_validator, validator


class StrictModel(BaseModel):
    """Base for config sections: unknown keys are rejected."""

    class Config:
        extra = Extra.forbid
        validate_assignment = True


class GraphSpec(StrictModel):
    """Communication topology."""

    kind: Literal["erdos_renyi", "complete"] = Field(
        "erdos_renyi", description="Graph family"
    )
    n_agents: int = Field(10, ge=1, description="Total number of agents, honest and Byzantine")
    p: float = Field(0.7, ge=0.0, le=1.0, description="Edge probability for erdos_renyi")
    seed: Optional[int] = Field(
        None, description="Graph seed; the run seed is used when omitted"
    )


class ByzantineSpec(StrictModel):
    """Which agents are Byzantine."""

    count: int = Field(2, ge=0, description="Number of Byzantine agents")
    ids: Optional[List[int]] = Field(
        None, description="Explicit Byzantine agent ids; drawn at random when omitted"
    )
    seed: Optional[int] = Field(
        None, ge=0, description="Role seed; the run seed is used when omitted"
    )

    @validator("ids")
    def ids_match_count(cls, v, values):
        if v is not None:
            if len(set(v)) != len(v):
                raise ValueError("Byzantine ids must be distinct")
            if "count" in values and len(v) != values["count"]:
                raise ValueError("len(ids) must equal count")
        return v


class AggregationSpec(StrictModel):
    """Aggregation rule and its parameter.

    ``b`` (trimmed mean) and ``q`` (IOS) default to the number of Byzantine
    neighbours of each agent when left unset.
    """

    rule: Literal["mean", "tm", "ios", "scc"] = Field("ios", description="Aggregation rule")
    b: Optional[int] = Field(None, ge=0, description="Trim count per side for tm")
    q: Optional[int] = Field(None, ge=0, description="Removal count for ios")
    tau: float = Field(1.0, ge=0.0, description="Clipping radius for scc; inf disables clipping")
    weights: Literal["metropolis", "uniform"] = Field(
        "metropolis", description="Per-agent weights over own and neighbour messages"
    )


class AttackSpec(StrictModel):
    """Byzantine behaviour."""

    kind: Literal["none", "gaussian", "duplicate", "alie", "signflip"] = Field(
        "signflip", description="Attack model"
    )
    r: float = Field(1.0, description="ALIE scale factor")
    victim: Optional[int] = Field(
        None, description="Duplicate-attack victim; drawn from the honest set when omitted"
    )
    std: float = Field(30.0, gt=0.0, description="Gaussian attack standard deviation")
    include_target: bool = Field(
        False, description="Whether the target's own half-step is part of its honest neighbourhood"
    )


class LossSpec(StrictModel):
    """Loss family.

    ``input_dim`` and ``classes`` are filled in from the dataset when a run
    is built; learner functions require them.
    """

    kind: Literal["strongly_convex", "softmax", "mlp"] = Field(
        "strongly_convex", description="Loss family"
    )
    lam: float = Field(
        0.1, ge=0.0, description="l2 weight; only the strongly_convex kind is regularised"
    )
    hidden: int = Field(16, ge=1, description="Hidden width of the mlp")
    input_dim: Optional[int] = Field(None, ge=1, description="Feature dimension")
    classes: Optional[int] = Field(None, ge=1, description="Number of classes")

    @property
    def reg(self) -> float:
        return self.lam if self.kind == "strongly_convex" else 0.0

    @property
    def mu(self) -> float:
        return self.reg

    @property
    def resolved(self) -> bool:
        return self.input_dim is not None and self.classes is not None

    @property
    def param_count(self) -> int:
        if not self.resolved:
            raise ValueError("loss spec has no input_dim/classes yet")
        d, c = self.input_dim, self.classes
        if self.kind == "mlp":
            h = self.hidden
            return h * d + h + c * h + c
        return c * (d + 1)


class ScheduleSpec(StrictModel):
    """Step-size family."""

    kind: Literal["sc", "cvx", "ncvx", "paper_exp"] = Field(
        "paper_exp", description="Step-size family"
    )
    k0: float = Field(100.0, ge=1.0, description="Offset k0")
    a: float = Field(1.0, gt=0.0, description="Numerator for ncvx")
    s: float = Field(1.0, gt=0.0, description="Numerator for paper_exp")
    mu: Optional[float] = Field(
        None, gt=0.0, description="Strong convexity for sc; taken from the loss when omitted"
    )
    L: Optional[float] = Field(
        None, gt=0.0, description="Smoothness for ncvx; estimated from data when omitted"
    )


class DataSpec(StrictModel):
    """Where training and test samples come from."""

    source: Literal["synthetic", "idx"] = Field("synthetic", description="Data source")
    classes: int = Field(10, ge=1, description="Number of classes (synthetic)")
    dim: int = Field(20, ge=1, description="Feature dimension (synthetic)")
    Z: int = Field(500, ge=1, description="Samples per honest agent")
    test_count: int = Field(1000, ge=1, description="Held-out test samples")
    separation: float = Field(3.0, ge=0.0, description="Distance of class means from the origin")
    seed: Optional[int] = Field(None, ge=0, description="Data seed; the run seed is used when omitted")
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None

    @root_validator(skip_on_failure=True)
    def idx_paths_present(cls, values):
        if values.get("source") == "idx":
            missing = [
                k for k in ("train_images", "train_labels", "test_images", "test_labels")
                if values.get(k) is None
            ]
            if missing:
                raise ValueError(f"idx source needs {', '.join(missing)}")
        return values


class InitSpec(StrictModel):
    """Shared initial model for all honest agents."""

    kind: Literal["auto", "zero", "normal"] = Field(
        "auto", description="Initialisation; auto is zero for linear losses and normal for mlp"
    )
    scale: float = Field(0.1, ge=0.0, description="Standard deviation for normal")


class RunConfig(StrictModel):
    """Everything one simulation run needs."""

    graph: GraphSpec = Field(default_factory=GraphSpec)
    byzantine: ByzantineSpec = Field(default_factory=ByzantineSpec)
    aggregation: AggregationSpec = Field(default_factory=AggregationSpec)
    attack: AttackSpec = Field(default_factory=AttackSpec)
    loss: LossSpec = Field(default_factory=LossSpec)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    data: DataSpec = Field(default_factory=DataSpec)
    init: InitSpec = Field(default_factory=InitSpec)
    batch_size: int = Field(256, ge=1, description="Mini-batch size per honest agent")
    steps: int = Field(2000, ge=1, description="Number of rounds K")
    seed: int = Field(0, ge=0, description="Run seed")
    record_every: int = Field(10, ge=1, description="Recording stride")

    @root_validator(skip_on_failure=True)
    def byzantine_fits_graph(cls, values):
        graph, byz = values["graph"], values["byzantine"]
        if byz.count >= graph.n_agents:
            raise ValueError("at least one agent must be honest")
        if byz.ids is not None and any(not 0 <= i < graph.n_agents for i in byz.ids):
            raise ValueError("Byzantine id out of range")
        return values


class PerturbSpec(StrictModel):
    """Which training sample the second run of a pair replaces."""

    agent: int = Field(..., ge=0, description="Honest agent whose dataset changes")
    index: int = Field(..., ge=0, description="Position j of the replaced sample")
    replacement_index: int = Field(
        0, ge=0, description="Test-set sample used as the replacement"
    )


class BoundInputs(StrictModel):
    """Constants feeding the closed-form generalization bounds."""

    rho: float = Field(0.0, ge=0.0, description="Contraction constant")
    chi: float = Field(0.0, ge=0.0, description="Skewness of the virtual mixing matrix")
    beta: float = Field(1.0, gt=0.0, le=1.0, description="Spectral gap")
    honest_count: int = Field(10, ge=1, description="|R|")
    byz_count: int = Field(0, ge=0, description="|B|")
    M: float = Field(1.0, gt=0.0, description="Gradient norm bound")
    L: float = Field(1.0, gt=0.0, description="Smoothness constant")
    mu: float = Field(1.0, gt=0.0, description="Strong convexity constant")
    Z: int = Field(10, ge=1, description="Samples per honest agent")
    k0: float = Field(10.0, gt=0.0, description="Step-size offset")
    a: float = Field(1.0, gt=0.0, description="Step-size numerator for the improved bound")
    c1: float = Field(1.0, gt=0.0, description="Absolute constant c1")
    c2: float = Field(1.0, gt=0.0, description="Absolute constant c2")

    @property
    def rho_star(self) -> float:
        return self.beta / (8.0 * math.sqrt(self.honest_count))

    @property
    def chi_indicator(self) -> float:
        return 1.0 if self.chi > 1e-12 else 0.0


class Command(StrictModel):
    """A validated CLI invocation."""

    kind: Literal["run", "pair", "sweep", "bounds", "check"]
    config: Optional[Path] = None
    output_root: Optional[Path] = None
    seed: Optional[int] = None
    perturb_agent: Optional[int] = Field(None, ge=0)
    perturb_index: Optional[int] = Field(None, ge=0)
    replacement_index: Optional[int] = Field(None, ge=0)
    axis: Optional[Literal["rule", "attack", "honest_count", "Z", "seed"]] = None
    values: List[str] = Field(default_factory=list)
    mode: Literal["run", "pair"] = "run"
    workers: int = Field(1, ge=1)
    theorem: Optional[Literal["1", "2", "3", "4", "lemma3"]] = None
    bound_inputs: Optional[BoundInputs] = None
    consensus_c: float = Field(1.0, gt=0.0)
    ks: List[float] = Field(default_factory=list)
    out: Optional[Path] = None
    aggregation: Optional[AggregationSpec] = None
    trials: int = Field(1000, ge=1)
    honest: int = Field(8, ge=1)
    byzantine: int = Field(2, ge=0)
    graph_kind: Literal["erdos_renyi", "complete"] = "complete"
    p: float = Field(0.7, ge=0.0, le=1.0)
    dim: int = Field(3, ge=1)
    log_level: str = "INFO"
    metrics_port: Optional[int] = None
    pushgateway: Optional[str] = None
