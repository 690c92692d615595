"""Excess empirical loss bound of randomized-projection DP-SGD and its pieces."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .privacy import (
    PrivacyParams,
    UnattainableTargetError,
    composition_factor,
    gaussian_baseline_sigma,
    solve_sigma,
)


@dataclass(frozen=True)
class UtilityParams:
    d: int
    bound: float
    eta: float
    rho: float
    sigma: float
    iters: int
    bits: int
    q: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d!r}")
        for name in ("bound", "eta", "rho"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be non-negative, got {self.sigma!r}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise ValueError(f"iters must be a positive integer, got {self.iters!r}")
        if int(self.bits) != self.bits or not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be an integer in [1, 16], got {self.bits!r}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must be a probability, got {self.q!r}")

    def with_(self, **kw) -> "UtilityParams":
        return replace(self, **kw)


def quantization_error(p: UtilityParams) -> float:
    k = 2**p.bits - 1
    hit = p.q / k**2
    miss = 2 ** (p.bits + 1) * (2 ** (p.bits + 1) - 1) / (3 * k**2) * (1.0 - p.q)
    return p.d * p.bound**2 * (hit + miss)


def noise_error(p: UtilityParams) -> float:
    return p.eta * p.sigma**2 * p.d


def utility_bound(p: UtilityParams) -> float:
    return (
        p.bound**2 / (2.0 * p.eta * p.iters)
        + quantization_error(p)
        + p.eta * p.rho**2 / 2.0
        + noise_error(p)
    )


@dataclass(frozen=True)
class CurvePoint:
    epsilon: float
    mode: str
    q: float
    sigma: float
    bound: float
    attainable: bool


def tradeoff_curve(
    base: UtilityParams,
    privacy: PrivacyParams,
    epsilon_grid,
    mode: str,
    delta: float = 1e-7,
    baseline_sensitivity: float | None = None,
) -> list[CurvePoint]:
    """Utility bound against total epsilon.

    ``rqp``: q fixed at ``base.q``, sigma solved for (eps, 0)-DP.
    ``proj_dp``: Gaussian-mechanism multiplier for (eps, delta)-DP under the
    same T*m/n composition, times ``baseline_sensitivity`` (default rho, the
    sensitivity of the clipped gradient sum the noise is added to), q = 1.
    Both curves report sigma as the std of the noise vector added to the
    gradient sum, which is the sigma the noise error term expects.
    """
    eps_grid = [float(e) for e in epsilon_grid]
    if any(e <= 0 for e in eps_grid) or eps_grid != sorted(eps_grid):
        raise ValueError("epsilon grid must be positive and ascending")
    out = []
    if mode == "rqp":
        pp = privacy.with_(q=base.q, bits=base.bits)
        for eps in eps_grid:
            try:
                sigma = solve_sigma(eps, pp)
            except UnattainableTargetError:
                out.append(CurvePoint(eps, mode, base.q, math.nan, math.nan, False))
                continue
            out.append(CurvePoint(eps, mode, base.q, sigma, utility_bound(base.with_(sigma=sigma)), True))
    elif mode == "proj_dp":
        sens = privacy.rho if baseline_sensitivity is None else baseline_sensitivity
        factor = composition_factor(privacy)
        for eps in eps_grid:
            sigma = gaussian_baseline_sigma(eps / factor, delta) * sens
            out.append(CurvePoint(eps, mode, 1.0, sigma, utility_bound(base.with_(sigma=sigma, q=1.0)), True))
    else:
        raise ValueError(f"unknown curve mode {mode!r}")
    return out
