"""Privacy accounting for randomized-quantization-projection SGD.

Per-step budget of one update (randomized projection of a Gaussian-perturbed
SGD step), its T*(m/n) composition, inverse solvers for q and sigma, and the
Gaussian-mechanism calibration used by the DP-SGD baselines.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .quantizer import make_grid, nearest_index, randomized_from_uniforms

BISECT_RTOL = 1e-9
BISECT_MAXITER = 200


class UnboundedPrivacyError(ValueError):
    """sigma = 0 with q = 1: the update is deterministic and leaks without bound."""


class UnattainableTargetError(ValueError):
    def __init__(self, target, lo, hi, what):
        self.target, self.lo, self.hi = target, lo, hi
        super().__init__(
            f"target epsilon {target:.6g} not attainable by varying {what}; "
            f"attainable range is [{lo:.6g}, {hi:.6g}]"
        )


def std_normal_cdf(x: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class PrivacyParams:
    bits: int
    q: float
    sigma: float
    eta: float
    batch: int
    n: int
    iters: int
    bound: float
    rho: float
    delta: float = 0.0

    def __post_init__(self):
        levels = 2**self.bits
        if int(self.bits) != self.bits or not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be an integer in [1, 16], got {self.bits!r}")
        if not (1.0 / (levels - 1) <= self.q <= 1.0):
            raise ValueError(f"q must lie in [1/(2^b-1), 1), got {self.q!r}")
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and non-negative, got {self.sigma!r}")
        for name in ("eta", "bound", "rho"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.batch < 1 or self.n < 1 or self.iters < 0:
            raise ValueError("batch and n must be positive, iters non-negative")
        if self.batch > self.n:
            raise ValueError(f"batch {self.batch} exceeds dataset size {self.n}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta!r}")

    @property
    def sampling_rate(self) -> float:
        return self.batch / self.n

    def with_(self, **kw) -> "PrivacyParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class PerStepBudget:
    epsilon_t: float
    sigma_l: float
    a1: float
    a2: float
    a3: float
    C: float


def effective_sigma(p: PrivacyParams, convention: str = "main") -> float:
    """Std of the noise on the pre-projection iterate.

    ``main`` is eta*sigma/m (the update divides the noisy gradient sum by m);
    ``appendix`` is eta*sigma.
    """
    if convention == "main":
        return p.eta * p.sigma / p.batch
    if convention == "appendix":
        return p.eta * p.sigma
    raise ValueError(f"unknown sigma_l convention {convention!r}")


def step_terms(p: PrivacyParams) -> tuple[float, float, float, float]:
    """(a1, a2, a3, C). C is kept as written even when it comes out negative."""
    levels = 2**p.bits
    a1 = p.bound / (levels - 1)
    C = p.bound - p.eta * p.rho
    a2 = p.bound + a1 + C
    a3 = p.bound - a1 + C
    return a1, a2, a3, C


def _mixture_weights(bits: int, q: float) -> tuple[float, float]:
    levels = 2**bits
    return (levels * q - 1.0) / (levels - 1), (1.0 - q) / (levels - 1)


def per_step_epsilon(p: PrivacyParams, convention: str = "main") -> PerStepBudget:
    if p.q >= 1.0 and p.sigma == 0.0:
        raise UnboundedPrivacyError("sigma = 0 and q = 1 give a deterministic update")
    a1, a2, a3, C = step_terms(p)
    sigma_l = effective_sigma(p, convention)
    coef, floor = _mixture_weights(p.bits, p.q)
    if sigma_l == 0.0:
        # noise-free limit: bin masses become indicators
        centred = 1.0
        shifted = 1.0 if (a3 < 0.0 < a2) else 0.0
    else:
        centred = 2.0 * std_normal_cdf(a1 / sigma_l) - 1.0
        shifted = std_normal_cdf(a2 / sigma_l) - std_normal_cdf(a3 / sigma_l)
    num = coef * centred + floor
    den = coef * shifted + floor
    if den <= 0.0:
        eps = math.inf
    else:
        eps = abs(math.log(num / den))
    return PerStepBudget(epsilon_t=eps, sigma_l=sigma_l, a1=a1, a2=a2, a3=a3, C=C)


def total_epsilon(p: PrivacyParams, convention: str = "main") -> float:
    if p.iters == 0:
        return 0.0
    return p.iters * p.sampling_rate * per_step_epsilon(p, convention).epsilon_t


def composition_factor(p: PrivacyParams) -> float:
    return p.iters * p.sampling_rate


def _gauss_legendre_mass(lo: np.ndarray, hi: np.ndarray, mean: np.ndarray, sd: float, nodes: int = 96) -> np.ndarray:
    """Normal(mean, sd) mass on [lo, hi] by Gauss-Legendre quadrature of the density."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    pts = mid[..., None] + half[..., None] * x
    z = (pts - mean[..., None]) / sd
    dens = np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))
    return half * (dens * w).sum(axis=-1)


def per_step_epsilon_oracle(p: PrivacyParams, grid_points: int = 1001, convention: str = "main") -> float:
    """Brute-force sup of the per-level log-likelihood ratio of one update.

    Each output level Q_i is reached with probability
    ``coef * P(v in [Q_i - a1, Q_i + a1]) + floor`` where v is the noisy
    pre-projection value. The first distribution is anchored on Q_i (the
    largest in-bin mass); the second is displaced by every shift c on a
    uniform grid over [-|M + C|, |M + C|], endpoints included. Bin masses
    come from quadrature of the Gaussian density, not from the cdf.
    """
    if grid_points < 1000:
        raise ValueError("oracle needs at least 1000 shift points")
    if p.q >= 1.0 and p.sigma == 0.0:
        raise UnboundedPrivacyError("sigma = 0 and q = 1 give a deterministic update")
    sd = effective_sigma(p, convention)
    if sd == 0.0:
        raise ValueError("oracle requires positive noise")
    grid = make_grid(p.bound, p.bits)
    a1, _, _, C = step_terms(p)
    reach = abs(p.bound + C)
    shifts = np.linspace(-reach, reach, grid_points)
    coef, floor = _mixture_weights(p.bits, p.q)

    lv = grid.levels[:, None] + np.zeros_like(shifts)[None, :]
    lo, hi = lv - a1, lv + a1
    p_anchor = coef * _gauss_legendre_mass(lo, hi, lv, sd) + floor
    p_shift = coef * _gauss_legendre_mass(lo, hi, lv + shifts[None, :], sd) + floor
    return float(np.max(np.abs(np.log(p_anchor) - np.log(p_shift))))


def _bisect(f, lo: float, hi: float, target: float, increasing: bool) -> float:
    """Bisection for f(x) = target on a monotone bracket; tolerance relative to target."""
    for _ in range(BISECT_MAXITER):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val - target) <= BISECT_RTOL * target:
            return mid
        if (val < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def epsilon_range_in_q(p: PrivacyParams) -> tuple[float, float]:
    q_min = 1.0 / (2**p.bits - 1)
    return total_epsilon(p.with_(q=q_min)), total_epsilon(p.with_(q=1.0))


def solve_q(target_epsilon: float, p: PrivacyParams) -> float:
    """q in [1/(2^b-1), 1) whose total budget equals the target. ``p.q`` is ignored."""
    if not target_epsilon > 0:
        raise ValueError("target epsilon must be positive")
    if p.sigma == 0.0:
        hi_eps = math.inf
        lo_eps = total_epsilon(p.with_(q=1.0 / (2**p.bits - 1)))
    else:
        lo_eps, hi_eps = epsilon_range_in_q(p)
    if not lo_eps <= target_epsilon < hi_eps:
        raise UnattainableTargetError(target_epsilon, lo_eps, hi_eps, "q")
    q_min = 1.0 / (2**p.bits - 1)
    return _bisect(lambda q: total_epsilon(p.with_(q=q)), q_min, 1.0, target_epsilon, increasing=True)


SIGMA_SEARCH = (1e-8, 1e8)


def epsilon_range_in_sigma(p: PrivacyParams) -> tuple[float, float]:
    lo_s, hi_s = SIGMA_SEARCH
    return total_epsilon(p.with_(sigma=hi_s)), total_epsilon(p.with_(sigma=lo_s))


def solve_sigma(target_epsilon: float, p: PrivacyParams) -> float:
    """Noise scale sigma whose total budget equals the target. ``p.sigma`` is ignored.

    Bisects over log(sigma) on [1e-8, 1e8].
    """
    if not target_epsilon > 0:
        raise ValueError("target epsilon must be positive")
    lo_eps, hi_eps = epsilon_range_in_sigma(p)
    if not lo_eps <= target_epsilon <= hi_eps:
        raise UnattainableTargetError(target_epsilon, lo_eps, hi_eps, "sigma")
    lo_s, hi_s = SIGMA_SEARCH
    f = lambda t: total_epsilon(p.with_(sigma=math.exp(t)))
    return math.exp(_bisect(f, math.log(lo_s), math.log(hi_s), target_epsilon, increasing=False))


def gaussian_baseline_sigma(epsilon: float, delta: float) -> float:
    """Noise multiplier of the classical Gaussian mechanism for (epsilon, delta)-DP."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def gaussian_baseline_epsilon(sigma: float, delta: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def warn_if_negative_c(p: PrivacyParams) -> bool:
    C = p.bound - p.eta * p.rho
    if C < 0:
        warnings.warn(f"C = M - eta*rho = {C:.4g} is negative; budget evaluated as written", stacklevel=2)
        return True
    return False


def audit_worst_case(p: PrivacyParams, samples: int, rng: np.random.Generator, convention: str = "main") -> dict:
    """Monte-Carlo audit of one scalar update (d = 1).

    Two adjacent noisy updates are placed at the configuration the closed
    form evaluates: one mean on a level, the other displaced by |M + C|.
    Each is sampled, clipped and projected with the real randomized
    projector. Returns per-outcome frequencies and the empirical max
    log-ratio with its delta-method standard error.
    """
    grid = make_grid(p.bound, p.bits)
    sd = effective_sigma(p, convention)
    _, _, _, C = step_terms(p)
    anchor = grid.levels[grid.size // 2]
    shift = abs(p.bound + C)
    counts = []
    for mean in (anchor, anchor + shift):
        v = mean + sd * rng.standard_normal(samples)
        u = rng.random(samples)
        out = randomized_from_uniforms(grid, p.q, nearest_index(grid, v), u)
        counts.append(np.bincount(nearest_index(grid, out), minlength=grid.size))
    c1, c2 = (c.astype(float) for c in counts)
    ok = (c1 > 0) & (c2 > 0)
    ratio = np.full(grid.size, np.nan)
    ratio[ok] = np.log(c1[ok] / c2[ok])
    # se of log(p1/p2) from two independent multinomials
    se = np.full(grid.size, np.nan)
    se[ok] = np.sqrt((1 - c1[ok] / samples) / c1[ok] + (1 - c2[ok] / samples) / c2[ok])
    worst = int(np.nanargmax(np.abs(ratio)))
    return {
        "anchor": float(anchor),
        "shift": float(shift),
        "log_ratio": ratio,
        "max_abs_log_ratio": float(abs(ratio[worst])),
        "std_error": float(se[worst]),
        "worst_level": float(grid.levels[worst]),
    }


def baseline_noise_multiplier(epsilon: float, delta: float, sampling_rate: float, steps: int,
                              accountant: str = "rdp") -> float:
    """Noise multiplier (std / clipping norm) giving DP-SGD an (epsilon, delta) total budget.

    ``rdp``: Renyi accountant of the subsampled Gaussian (dp-accounting),
    solved by bisection on the multiplier. ``equal``: classical Gaussian
    calibration at a per-step budget epsilon / (T * m / n).
    """
    if accountant == "equal":
        return gaussian_baseline_sigma(epsilon / (steps * sampling_rate), delta)
    if accountant != "rdp":
        raise ValueError(f"unknown baseline accountant {accountant!r}")
    f = lambda t: rdp_epsilon(math.exp(t), delta, sampling_rate, steps)
    lo, hi = math.log(0.3), math.log(1e3)
    if f(hi) > epsilon:
        raise UnattainableTargetError(epsilon, f(hi), math.inf, "the noise multiplier")
    while f(lo) < epsilon:
        lo -= 1.0
    return math.exp(_bisect(f, lo, hi, epsilon, increasing=False))


def rdp_epsilon(multiplier: float, delta: float, sampling_rate: float, steps: int) -> float:
    import logging

    import dp_accounting
    from dp_accounting.rdp import rdp_privacy_accountant

    # very small multipliers make some fractional orders fail to converge; those
    # orders are dropped by the library, which logs a warning per order
    logging.getLogger("absl").setLevel(logging.ERROR)
    event = dp_accounting.SelfComposedDpEvent(
        dp_accounting.PoissonSampledDpEvent(sampling_rate, dp_accounting.GaussianDpEvent(multiplier)), steps
    )
    acc = rdp_privacy_accountant.RdpAccountant()
    acc.compose(event)
    return float(acc.get_epsilon(delta))
