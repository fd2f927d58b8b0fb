"""Closed-form return-discrepancy penalties and the optimal branch length."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BoundParams:
    gamma: float
    r_max: float = 1.0
    eps_m: float = 0.0
    eps_m_prime: float = 0.0
    eps_pi: float = 0.0
    k: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if not (math.isfinite(self.r_max) and self.r_max > 0):
            raise ValueError("r_max must be positive and finite")
        for name in ("eps_m", "eps_m_prime", "eps_pi"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if int(self.k) != self.k or self.k < 0:
            raise ValueError("k must be a non-negative integer")


@dataclass(frozen=True)
class GeneralizationModel:
    intercept: float
    slope: float

    def __post_init__(self):
        if self.intercept < 0:
            raise ValueError("intercept must be >= 0")


def penalty_monotonic(p: BoundParams) -> float:
    """C(eps_m, eps_pi) = 2 g r (eps_m + 2 eps_pi) / (1-g)^2 + 4 r eps_pi / (1-g)."""
    g, r = p.gamma, p.r_max
    return 2 * g * r * (p.eps_m + 2 * p.eps_pi) / (1 - g) ** 2 + 4 * r * p.eps_pi / (1 - g)


def penalty_branched(p: BoundParams) -> float:
    """Branched penalty with model error measured under the data-collecting policy."""
    g, r, k, ep, em = p.gamma, p.r_max, p.k, p.eps_pi, p.eps_m
    return 2 * r * (g ** (k + 1) * ep / (1 - g) ** 2 + (g ** k + 2) * ep / (1 - g)
                    + k * (em + 2 * ep) / (1 - g))


def penalty_branched_current(p: BoundParams) -> float:
    """Branched penalty with model error measured under the current policy (eps_m_prime)."""
    g, r, k, ep = p.gamma, p.r_max, p.k, p.eps_pi
    return 2 * r * (g ** (k + 1) * ep / (1 - g) ** 2 + g ** k * ep / (1 - g) + k * p.eps_m_prime / (1 - g))


def _argmin(fn, p: BoundParams, k_max: int) -> int:
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    best_k, best = 0, math.inf
    for k in range(k_max + 1):
        v = fn(_with_k(p, k))
        if v < best:  # strict: ties stay with the smaller k
            best_k, best = k, v
    return best_k


def _with_k(p: BoundParams, k: int) -> BoundParams:
    return BoundParams(p.gamma, p.r_max, p.eps_m, p.eps_m_prime, p.eps_pi, k)


def optimal_branch_length(p: BoundParams, k_max: int) -> int:
    """Smallest k in [0, k_max] minimizing :func:`penalty_branched_current`."""
    return _argmin(penalty_branched_current, p, k_max)


def argmin_branched(p: BoundParams, k_max: int) -> int:
    """Same search under :func:`penalty_branched` (data-policy model error)."""
    return _argmin(penalty_branched, p, k_max)


def predict_current_error(g: GeneralizationModel, eps_pi: float) -> float:
    if eps_pi < 0:
        raise ValueError("eps_pi must be >= 0")
    return max(0.0, g.intercept + g.slope * eps_pi)


def all_penalties(p: BoundParams, k_max: int) -> dict:
    return {"penalty_monotonic": penalty_monotonic(p), "penalty_branched": penalty_branched(p),
            "penalty_branched_current": penalty_branched_current(p),
            "k_star": optimal_branch_length(p, k_max)}
