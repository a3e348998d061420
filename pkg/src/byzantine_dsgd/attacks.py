"""Byzantine message generators.

Each attack sees the half-step messages of one target's honest
neighbourhood and produces the vector sent to that target.
"""

from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, validator

from byzantine_dsgd.errors import DimensionMismatch, VictimNotVisible
from byzantine_dsgd.models import AttackSpec


class AttackContext(BaseModel):
    """What a Byzantine agent knows when crafting the message for ``target``."""

    target: int = Field(..., description="Honest agent receiving the message")
    honest_msgs: List[Tuple[int, np.ndarray]] = Field(
        default_factory=list, description="(sender, half-step) pairs of the target's neighbourhood"
    )
    step: int = Field(..., ge=0)
    rng: np.random.Generator
    dim: int = Field(..., ge=1)

    class Config:
        arbitrary_types_allowed = True

    @validator("honest_msgs")
    def consistent_dimension(cls, v, values):
        shapes = {m.shape for _, m in v}
        if len(shapes) > 1:
            raise DimensionMismatch(f"honest messages have shapes {sorted(shapes)}")
        return v

    def stacked(self) -> np.ndarray:
        """Honest messages in ascending sender order."""
        if not self.honest_msgs:
            raise ValueError(f"no honest messages visible around agent {self.target}")
        return np.stack([m for _, m in sorted(self.honest_msgs, key=lambda e: e[0])])


def gaussian_attack(ctx: AttackContext, std: float = 30.0) -> np.ndarray:
    return ctx.rng.normal(0.0, std, size=ctx.dim)


def duplicate_attack(ctx: AttackContext, victim: int) -> np.ndarray:
    for sender, msg in ctx.honest_msgs:
        if sender == victim:
            return msg.copy()
    raise VictimNotVisible(victim)


def alie_attack(ctx: AttackContext, r: float) -> np.ndarray:
    """Neighbourhood mean plus ``r`` coordinate-wise (population) standard deviations."""
    x = ctx.stacked()
    return x.mean(axis=0) + r * x.std(axis=0)


def sign_flip_attack(ctx: AttackContext) -> np.ndarray:
    return -ctx.stacked().mean(axis=0)


def craft(spec: AttackSpec, ctx: AttackContext, victim: Optional[int] = None) -> Optional[np.ndarray]:
    """Message for ``ctx.target`` under ``spec``; ``None`` means stay silent."""
    if spec.kind == "none":
        return None
    if spec.kind == "gaussian":
        return gaussian_attack(ctx, spec.std)
    if spec.kind == "duplicate":
        if victim is None:
            raise ValueError("duplicate attack needs a victim")
        return duplicate_attack(ctx, victim)
    if spec.kind == "alie":
        return alie_attack(ctx, spec.r)
    if spec.kind == "signflip":
        return sign_flip_attack(ctx)
    raise ValueError(f"unknown attack {spec.kind!r}")
