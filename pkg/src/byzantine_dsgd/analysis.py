"""Empirical generalization gaps, consensus constants and growth fits."""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from byzantine_dsgd.bounds import THEOREMS, consensus_bound
from byzantine_dsgd.errors import EmptyWindow, GridMismatch
from byzantine_dsgd.models import BoundInputs
from byzantine_dsgd.sim_models import GapEstimate, GrowthFit, RunTrace, StabilityTrace

GROWTH_MODELS = ("constant", "log", "linear", "power")


def disagreement(models: Sequence[np.ndarray]) -> float:
    """Mean squared distance of the models to their average."""
    x = np.stack(models)
    return float(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))


def gen_gap(traces: Sequence[RunTrace]) -> GapEstimate:
    """Test-minus-train loss per recorded step, averaged over repeats.

    The standard error uses the sample standard deviation and is 0 for a
    single trace.
    """
    if not traces:
        raise ValueError("need at least one trace")
    ks = traces[0].ks
    for t in traces[1:]:
        if t.ks != ks:
            raise GridMismatch("traces were recorded at different steps")
    gaps = np.array([[r.avg_loss_test - r.avg_loss_train for r in t.records] for t in traces])
    n = len(traces)
    stderr = gaps.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(ks))
    return GapEstimate(
        ks=list(ks), mean=gaps.mean(axis=0).tolist(), stderr=stderr.tolist(), repeats=n
    )


def fit_consensus_constant(
    trace: RunTrace, M_hat: float, k0: float, k_min: int, k_max: Optional[int] = None
) -> float:
    """``max H^k (k + k0)^2 / M_hat^2`` over recorded ``k_min <= k <= k_max``."""
    if M_hat <= 0:
        raise ValueError("M_hat must be positive")
    window = [
        r for r in trace.records if r.k >= k_min and (k_max is None or r.k <= k_max)
    ]
    if not window:
        raise EmptyWindow(f"no recorded steps in [{k_min}, {k_max}]")
    return max(r.H * (r.k + k0) ** 2 for r in window) / M_hat ** 2


def _shape(model: str, t: np.ndarray, a: float) -> Optional[np.ndarray]:
    if model == "constant":
        return None
    if model == "log":
        return np.log(t)
    if model == "linear":
        return t
    if model == "power":
        return t ** (a / (a + 1.0))
    raise ValueError(f"unknown growth model {model!r}")


def fit_growth(
    stab: StabilityTrace, model: str, k0: float, k_min: int = 100, a: float = 1.0
) -> GrowthFit:
    """Least-squares fit of ``delta^k ~ c0 + c1 * shape(k + k0)`` on ``k >= k_min``.

    ``power`` uses the exponent ``a / (a + 1)``.
    """
    pts = [(r.k, r.delta) for r in stab.records if r.k >= k_min]
    if len(pts) < 10:
        raise EmptyWindow(f"{len(pts)} recorded points at k >= {k_min}, need 10")
    k = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts])
    shape = _shape(model, k + k0, a)
    cols = [np.ones_like(k)] if shape is None else [np.ones_like(k), shape]
    design = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sum((design @ coef - y) ** 2))
    return GrowthFit(model=model, params=coef.tolist(), residual=residual)


def classify_growth(stab: StabilityTrace, k0: float, k_min: int = 100, tolerance: float = 0.1) -> str:
    """Simplest of constant/log/linear whose residual is within ``tolerance`` of the best."""
    fits = [fit_growth(stab, m, k0, k_min) for m in ("constant", "log", "linear")]
    best = min(f.residual for f in fits)
    for f in fits:
        if f.residual <= best * (1.0 + tolerance) + 1e-15:
            return f.model
    return fits[-1].model


def bound_curve(
    theorem: str, inputs: BoundInputs, ks: Sequence[float], c: float = 1.0
) -> List[Tuple[float, float]]:
    """``(k, bound)`` rows for a theorem id or ``lemma3``."""
    if theorem == "lemma3":
        return [(k, consensus_bound(c, inputs.M, k, inputs.k0)) for k in ks]
    try:
        fn = THEOREMS[theorem]
    except KeyError:
        raise ValueError(f"unknown theorem {theorem!r}") from None
    return [(k, fn(inputs, k)) for k in ks]
