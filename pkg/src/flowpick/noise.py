"""Exploration noise regimes for the flow sampler.

Three regimes: a fixed isotropic SDE scale (independent of all learned
parameters), a fully learned per-dimension scale, and SCAN which combines
the learned scale with an annealed strictly positive floor
sigma_min(t) = alpha(k) * sqrt(t / (1 - t)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

REGIMES = ("sde", "flow", "scan")


@dataclass
class NoiseSchedule:
    regime: str = "scan"
    alpha0: float = 0.3
    alpha1: float = 0.05
    K: int = 80                 # annealing horizon in global training steps
    sde_sigma0: float = 0.3
    sigma_cap: float = 2.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if not (self.alpha0 >= self.alpha1 >= 0.0):
            raise ValueError("need alpha0 >= alpha1 >= 0")
        if self.K < 1:
            raise ValueError("annealing horizon K must be >= 1")
        if self.sde_sigma0 <= 0 or self.sigma_cap <= 0:
            raise ValueError("noise scales must be positive")


def alpha(k: int, sched: NoiseSchedule) -> float:
    """Piecewise-linear anneal from alpha0 to alpha1 over K steps."""
    if k < 0:
        raise ValueError("training step k must be >= 0")
    return sched.alpha0 + (sched.alpha1 - sched.alpha0) * min(k, sched.K) / sched.K


def sigma_min(t: float, k: int, sched: NoiseSchedule) -> float:
    """Annealed noise floor alpha(k) * sqrt(t / (1 - t)), capped."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"flow time t={t} outside [0, 1)")
    return min(alpha(k, sched) * math.sqrt(t / (1.0 - t)), sched.sigma_cap)


def sigma_total(sigma_learned, t: float, k: int, sched: NoiseSchedule, delta: float):
    """Per-dimension total scale for one integration step of size delta.

    Accepts an autodiff Tensor (differentiable path used by the PPO ratio)
    or a plain array. In the SDE regime the result is a constant and carries
    no dependence on sigma_learned.
    """
    if sched.regime == "sde":
        const = sched.sde_sigma0 * math.sqrt(delta)
        if isinstance(sigma_learned, ad.Tensor):
            return ad.Tensor(np.full_like(sigma_learned.data, const))
        return np.full_like(np.asarray(sigma_learned, dtype=np.float64), const)
    if sched.regime == "flow":
        return sigma_learned
    floor = sigma_min(t, k, sched)
    if isinstance(sigma_learned, ad.Tensor):
        return ad.add(floor, ad.softplus(ad.sub(sigma_learned, floor)))
    x = np.asarray(sigma_learned, dtype=np.float64) - floor
    return floor + np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def effective_entropy_floor(sched: NoiseSchedule, k: int, dims: int, t_grid) -> float:
    """Certified lower bound on summed per-increment Gaussian entropy (SCAN).

    Sums 0.5 * ln(2*pi*e*sigma_min^2) over the grid of flow times and action
    dimensions, using the floor scale only.
    """
    total = 0.0
    for t in t_grid:
        s = sigma_min(t, k, sched)
        total += dims * (0.5 * math.log(2.0 * math.pi * math.e) + math.log(max(s, 1e-300)))
    return total
