"""Closed-form generalization-error bounds and the consensus envelope.

All four generalization bounds require the contraction constant to be
below ``beta / (8 sqrt(|R|))`` and raise ``HypothesisViolated`` otherwise.
The absolute constants ``c1`` and ``c2`` come from ``BoundInputs``.
"""

import math

from byzantine_dsgd.errors import DeltaZero, HypothesisViolated
from byzantine_dsgd.models import BoundInputs


def _gate(inp: BoundInputs, k: float) -> None:
    if inp.rho >= inp.rho_star:
        raise HypothesisViolated(inp.rho, inp.rho_star)
    if k < 0:
        raise ValueError("k must be nonnegative")


def _byzantine_terms(inp: BoundInputs) -> float:
    """``2M^2/(Z|R|) + 4 c1 rho |R| M^2 + 2 c1 chi sqrt(|R|) M^2``."""
    r = inp.honest_count
    m2 = inp.M ** 2
    return (
        2.0 * m2 / (inp.Z * r)
        + 4.0 * inp.c1 * inp.rho * r * m2
        + 2.0 * inp.c1 * inp.chi * math.sqrt(r) * m2
    )


def bound_strongly_convex(inp: BoundInputs, k: float) -> float:
    _gate(inp, k)
    t = k + inp.k0
    if t - 1.0 <= 0.0:
        raise ValueError("k + k0 must exceed 1")
    transient = (
        inp.c2 * inp.chi_indicator * inp.M ** 2 * inp.L * math.log(t)
        / (inp.mu ** 2 * (t - 1.0))
    )
    return transient + _byzantine_terms(inp) / inp.mu


def bound_convex(inp: BoundInputs, k: float) -> float:
    _gate(inp, k)
    t = k + inp.k0
    return inp.c2 * inp.chi_indicator * inp.M ** 2 * inp.L + _byzantine_terms(inp) * math.log(t)


def bound_nonconvex(inp: BoundInputs, k: float) -> float:
    _gate(inp, k)
    t = k + inp.k0
    return (
        inp.c2 * inp.chi_indicator * inp.M ** 2 * t / inp.L
        + _byzantine_terms(inp) / inp.L * t
    )


def improved_delta(inp: BoundInputs) -> float:
    """``Delta`` of the first-divergence argument for step sizes ``a/(L(k+k0))``."""
    r = inp.honest_count
    m2 = inp.M ** 2
    a = inp.a
    return (
        2.0 * a * m2 / (inp.L * r)
        + 4.0 * a * inp.c1 * inp.rho * r * inp.Z * m2 / inp.L
        + 2.0 * a * inp.c1 * inp.chi * math.sqrt(r) * inp.Z * m2 / inp.L
    )


def bound_nonconvex_improved(inp: BoundInputs, k: float) -> float:
    """Sublinear non-convex bound; assumes the loss takes values in [0, 1]."""
    _gate(inp, k)
    delta = improved_delta(inp)
    indicator = inp.chi_indicator
    if delta == 0.0 and indicator:
        raise DeltaZero("Delta is zero while chi is nonzero")
    t = k + inp.k0
    a = inp.a
    first = inp.c2 * indicator * inp.M ** 2 / (inp.L * delta) if indicator else 0.0
    return first + (1.0 / inp.Z + 1.0 / (a * inp.Z)) * delta ** (1.0 / (a + 1.0)) * t ** (a / (a + 1.0))


def consensus_bound(c: float, M: float, k: float, k0: float) -> float:
    """``c M^2 / (k + k0)^2``."""
    if c <= 0 or M <= 0 or k0 <= 0 or k < 0:
        raise ValueError("c, M and k0 must be positive and k nonnegative")
    return c * M ** 2 / (k + k0) ** 2


THEOREMS = {
    "1": bound_strongly_convex,
    "2": bound_convex,
    "3": bound_nonconvex,
    "4": bound_nonconvex_improved,
}
