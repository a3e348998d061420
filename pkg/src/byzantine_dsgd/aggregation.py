"""Aggregation rules applied by honest agents to their inbound messages.

All rules stack the inputs in ascending sender-id order (own included) so
that results do not depend on message arrival order.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from byzantine_dsgd.errors import DimensionMismatch, InvalidWeights, TooFewInputs
from byzantine_dsgd.models import AggregationSpec

Message = Tuple[int, np.ndarray]


class InboundSet(BaseModel):
    """Own half-step plus the messages received in one round."""

    own_id: int
    own: np.ndarray
    messages: List[Message] = Field(default_factory=list)
    weights: Optional[Dict[int, float]] = Field(
        None, description="Weight per sender id, own_id included"
    )

    class Config:
        arbitrary_types_allowed = True

    def stack(self) -> Tuple[List[int], np.ndarray]:
        """Sender ids and the matrix of vectors, rows in ascending id order."""
        d = self.own.shape
        entries = [(self.own_id, self.own)] + list(self.messages)
        for sender, vec in entries:
            if vec.shape != d:
                raise DimensionMismatch(
                    f"message from {sender} has shape {vec.shape}, expected {d}"
                )
        entries.sort(key=lambda e: e[0])
        ids = [e[0] for e in entries]
        return ids, np.stack([e[1] for e in entries])

    def weight_vector(self, ids: Sequence[int]) -> np.ndarray:
        if self.weights is None:
            raise InvalidWeights("this rule needs weights")
        try:
            w = np.array([self.weights[i] for i in ids], dtype=float)
        except KeyError as e:
            raise InvalidWeights(f"no weight for sender {e.args[0]}") from None
        if np.any(w < 0):
            raise InvalidWeights("weights must be nonnegative")
        return w

    @property
    def count(self) -> int:
        return 1 + len(self.messages)


def _normalised(w: np.ndarray) -> np.ndarray:
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise InvalidWeights(f"weights sum to {float(w.sum())!r}, expected 1")
    return w


def weighted_mean(inbound: InboundSet) -> np.ndarray:
    ids, x = inbound.stack()
    w = _normalised(inbound.weight_vector(ids))
    return w @ x


def trimmed_mean(inbound: InboundSet, b: int) -> np.ndarray:
    """Coordinate-wise: drop the ``b`` largest and smallest values, average the rest.

    Weights are ignored.
    """
    if b < 0:
        raise ValueError("b must be nonnegative")
    _, x = inbound.stack()
    n = x.shape[0]
    if n <= 2 * b:
        raise TooFewInputs(f"{n} inputs cannot be trimmed by {b} on each side")
    return np.sort(x, axis=0)[b:n - b].mean(axis=0)


def ios(inbound: InboundSet, q: int) -> np.ndarray:
    """Iterative outlier scissor.

    ``q`` times, the message farthest from the weight-renormalised average of
    the trusted set is dropped; the agent's own vector is never dropped and
    ties go to the lowest sender id.
    """
    if q < 0:
        raise ValueError("q must be nonnegative")
    if q >= len(inbound.messages) and q > 0:
        raise TooFewInputs(f"cannot remove {q} of {len(inbound.messages)} messages")
    ids, x = inbound.stack()
    w = inbound.weight_vector(ids)
    trusted = np.ones(len(ids), dtype=bool)
    own_row = ids.index(inbound.own_id)
    for _ in range(q):
        wt = w * trusted
        avg = wt @ x / wt.sum()
        dist = np.linalg.norm(x - avg, axis=1)
        dist[~trusted] = -1.0
        dist[own_row] = -1.0
        trusted[int(np.argmax(dist))] = False
    wt = w * trusted
    return wt @ x / wt.sum()


def scc(inbound: InboundSet, tau: float) -> np.ndarray:
    """Self-centred clipping around the agent's own vector."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    ids, x = inbound.stack()
    w = _normalised(inbound.weight_vector(ids))
    diffs = x - inbound.own
    if not math.isinf(tau):
        norms = np.linalg.norm(diffs, axis=1)
        scale = np.ones_like(norms)
        moved = norms > 0
        scale[moved] = np.minimum(1.0, tau / norms[moved])
        diffs = diffs * scale[:, None]
    return inbound.own + w @ diffs


def resolve_parameter(spec: AggregationSpec, byz_neighbours: int) -> float:
    """The rule's parameter, sized to the Byzantine neighbour count when unset."""
    if spec.rule == "tm":
        return spec.b if spec.b is not None else byz_neighbours
    if spec.rule == "ios":
        return spec.q if spec.q is not None else byz_neighbours
    if spec.rule == "scc":
        return spec.tau
    return 0


def aggregate(spec: AggregationSpec, inbound: InboundSet, byz_neighbours: int = 0) -> np.ndarray:
    param = resolve_parameter(spec, byz_neighbours)
    if spec.rule == "mean":
        return weighted_mean(inbound)
    if spec.rule == "tm":
        return trimmed_mean(inbound, int(param))
    if spec.rule == "ios":
        return ios(inbound, int(param))
    if spec.rule == "scc":
        return scc(inbound, float(param))
    raise ValueError(f"unknown rule {spec.rule!r}")


def check_contraction(
    rule: AggregationSpec,
    honest_points: Sequence[np.ndarray],
    byz_points: Sequence[np.ndarray],
    w_row: Sequence[float],
    inbound_weights: Optional[Sequence[float]] = None,
) -> Tuple[float, float]:
    """Both sides of the contraction inequality for one configuration.

    ``honest_points[0]`` is the aggregating agent's own vector. ``w_row``
    weights the honest points and defines ``x_hat``; ``inbound_weights``
    (honest points first, then Byzantine) are the weights the rule sees and
    default to uniform over all inputs. Returns ``(lhs, spread)`` with
    ``lhs = ||A(...) - x_hat||`` and ``spread = max ||x_m - x_hat||``.
    """
    honest = [np.asarray(p, dtype=float) for p in honest_points]
    byz = [np.asarray(p, dtype=float) for p in byz_points]
    d = honest[0].shape
    for p in honest + byz:
        if p.shape != d:
            raise DimensionMismatch(f"point of shape {p.shape}, expected {d}")
    w = np.asarray(w_row, dtype=float)
    if w.shape != (len(honest),):
        raise DimensionMismatch("w_row must have one weight per honest point")
    total = len(honest) + len(byz)
    if inbound_weights is None:
        inbound_weights = [1.0 / total] * total
    if len(inbound_weights) != total:
        raise DimensionMismatch("inbound_weights must cover every input")

    x_hat = w @ np.stack(honest)
    inbound = InboundSet(
        own_id=0,
        own=honest[0],
        messages=[(i, p) for i, p in enumerate(honest[1:] + byz, start=1)],
        weights={i: float(v) for i, v in enumerate(inbound_weights)},
    )
    out = aggregate(rule, inbound, byz_neighbours=len(byz))
    lhs = float(np.linalg.norm(out - x_hat))
    spread = float(max(np.linalg.norm(p - x_hat) for p in honest))
    if spread == 0.0 and lhs <= 1e-12:
        return 0.0, 0.0
    return lhs, spread
