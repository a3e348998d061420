"""Models exchanged and produced by simulation runs."""

from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, validator


class HalfStepMessage(BaseModel):
    """A vector sent from ``sender`` to ``receiver`` in round ``step``."""

    sender: int
    receiver: int
    step: int
    vector: np.ndarray
    byzantine: bool = False

    class Config:
        arbitrary_types_allowed = True


class TraceRecord(BaseModel):
    """Metrics of the honest average model at one recorded step."""

    k: int
    xbar: np.ndarray
    H: float = Field(..., ge=0.0, description="Disagreement of honest models")
    avg_loss_train: float
    avg_loss_test: float
    acc_test: float
    norms: Dict[int, float] = Field(default_factory=dict, description="Per-agent model norm")

    class Config:
        arbitrary_types_allowed = True


class RunTrace(BaseModel):
    records: List[TraceRecord] = Field(default_factory=list)

    @validator("records")
    def increasing_k(cls, v):
        ks = [r.k for r in v]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("recorded steps must be strictly increasing")
        return v

    @property
    def ks(self) -> List[int]:
        return [r.k for r in self.records]

    def at(self, k: int) -> TraceRecord:
        for r in self.records:
            if r.k == k:
                return r
        raise KeyError(f"step {k} was not recorded")


class StabilityRecord(BaseModel):
    k: int
    delta: float = Field(..., ge=0.0)
    eta: float = Field(..., ge=0.0)


class StabilityTrace(BaseModel):
    """Distances between the two runs of a pair."""

    records: List[StabilityRecord] = Field(default_factory=list)

    @property
    def ks(self) -> List[int]:
        return [r.k for r in self.records]

    def deltas(self) -> np.ndarray:
        return np.array([r.delta for r in self.records])

    def at(self, k: int) -> StabilityRecord:
        for r in self.records:
            if r.k == k:
                return r
        raise KeyError(f"step {k} was not recorded")


class PairResult(BaseModel):
    first: RunTrace
    second: RunTrace
    stability: StabilityTrace


class GapEstimate(BaseModel):
    """Seed-averaged test-minus-train loss of the honest average model."""

    ks: List[int]
    mean: List[float]
    stderr: List[float]
    repeats: int = Field(..., ge=1)

    def at(self, k: int) -> float:
        return self.mean[self.ks.index(k)]


class GrowthFit(BaseModel):
    model: str
    params: List[float] = Field(..., description="Intercept, then the shape coefficient")
    residual: float = Field(..., ge=0.0, description="Residual sum of squares")


class SweepResult(BaseModel):
    """Outcome of one value of a sweep axis."""

    value: str
    seed: int
    status: str = Field(..., description="ok or failed")
    trace: Optional[RunTrace] = None
    pair: Optional[PairResult] = None
    error: Optional[str] = None
    config_hash: Optional[str] = None
