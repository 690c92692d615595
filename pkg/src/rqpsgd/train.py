"""SGD, DP-SGD, Proj-DP-SGD and RQP-SGD training loops.

All four loops draw from the RNG in the same layout every iteration:
m batch indices, then one standard normal per weight, then one uniform per
weight. Plain SGD and deterministic projection ignore what they do not
need, which keeps seeded runs of different algorithms on the same stream
(sigma = 0 reproduces SGD exactly, q -> 1 reproduces Proj-DP-SGD).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import privacy
from .model import LinearModel, accuracy, clip_gradient, per_example_grads, weight_rows
from .quantizer import QuantizationGrid, nearest_index, randomized_from_uniforms

ALGORITHMS = ("sgd", "dp_sgd", "proj_dp_sgd", "rqp_sgd")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite iterate at iteration {iteration}")


@dataclass
class TrainConfig:
    algorithm: str
    eta: float
    batch: int
    iters: int
    rho: float
    loss: str = "logistic"
    sigma: float = 0.0  # std of the noise vector added to the clipped gradient sum
    grid: QuantizationGrid | None = None
    q: float | None = None
    bound: float | None = None  # optional box for unprojected DP-SGD
    seed: int = 0
    check_grid: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.batch < 1 or self.iters < 0:
            raise ValueError("batch must be positive and iters non-negative")
        if not (self.eta > 0 and self.rho > 0):
            raise ValueError("eta and rho must be positive")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be non-negative, got {self.sigma!r}")
        projected = self.algorithm in ("proj_dp_sgd", "rqp_sgd")
        if projected and self.grid is None:
            raise ValueError(f"{self.algorithm} needs a quantization grid")
        if not projected and self.grid is not None:
            raise ValueError(f"{self.algorithm} does not project; drop the grid")
        if self.algorithm == "rqp_sgd":
            if self.q is None or not 0.0 < self.q < 1.0:
                raise ValueError(f"rqp_sgd needs q in (0, 1), got {self.q!r}")
        elif self.q is not None:
            raise ValueError(f"q only applies to rqp_sgd, not {self.algorithm}")

    def scalars(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("grid", "check_grid")}
        d["bits"] = self.grid.bits if self.grid else None
        d["grid_bound"] = self.grid.bound if self.grid else None
        return d


@dataclass
class RunRecord:
    final_weights: LinearModel
    averaged_weights: LinearModel
    test_accuracy_final: float
    test_accuracy_averaged: float
    realized_total_epsilon: float
    per_step_epsilon: float
    wallclock: float = field(default=0.0, compare=False)

    def scalars(self) -> dict:
        return {
            "test_accuracy_final": self.test_accuracy_final,
            "test_accuracy_averaged": self.test_accuracy_averaged,
            "realized_total_epsilon": self.realized_total_epsilon,
            "per_step_epsilon": self.per_step_epsilon,
        }


def sample_batch(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m uniform indices in [0, n), with replacement."""
    if n < 1:
        raise ValueError("cannot sample from an empty dataset")
    if m < 1:
        raise ValueError("batch size must be positive")
    return rng.integers(0, n, size=m)


def initial_weights(config: TrainConfig, classes: int, features: int) -> LinearModel:
    """All zeros, snapped onto the grid when the algorithm projects."""
    W = np.zeros((classes, features))
    if config.grid is not None:
        W = config.grid.levels[nearest_index(config.grid, W)]
        return LinearModel(W, config.grid.bound)
    return LinearModel(W, config.bound)


def run(config: TrainConfig, X: np.ndarray, y: np.ndarray, init: LinearModel) -> tuple[LinearModel, LinearModel]:
    """Run the configured loop; returns (final, averaged) models."""
    rng = np.random.default_rng(config.seed)
    W = np.array(init.weights, dtype=float)
    if config.grid is not None and not config.grid.contains(W):
        raise ValueError("initial weights must lie on the grid")
    n = len(y)
    total = np.zeros_like(W)
    noisy = config.algorithm != "sgd"
    grid = config.grid
    for t in range(config.iters):
        idx = sample_batch(n, config.batch, rng)
        z = rng.standard_normal(W.shape)
        u = rng.random(W.shape)
        g = clip_gradient(per_example_grads(config.loss, W, X[idx], y[idx]), config.rho).sum(axis=0)
        if noisy:
            with np.errstate(over="ignore", invalid="ignore"):
                g = g + config.sigma * z
        with np.errstate(over="ignore", invalid="ignore"):
            v = W - config.eta * g / config.batch
        if not np.all(np.isfinite(v)):
            raise TrainingDivergedError(t)
        if config.algorithm == "rqp_sgd":
            W = randomized_from_uniforms(grid, config.q, nearest_index(grid, v), u)
        elif config.algorithm == "proj_dp_sgd":
            W = grid.levels[nearest_index(grid, v)]
        elif config.bound is not None:
            W = np.clip(v, -config.bound, config.bound)
        else:
            W = v
        if config.check_grid and grid is not None and not grid.contains(W):
            raise AssertionError(f"iterate {t + 1} left the grid")
        total += W
    bound = grid.bound if grid is not None else config.bound
    averaged = total / config.iters if config.iters else np.array(init.weights, dtype=float)
    return LinearModel(W, bound), LinearModel(averaged, bound)


def _train(config: TrainConfig, train_set, test_set, init: LinearModel | None, accountant) -> RunRecord:
    start = time.perf_counter()
    if init is None:
        init = initial_weights(config, weight_rows(config.loss, train_set.classes), train_set.feature_dim)
    final, averaged = run(config, train_set.X, train_set.y, init)
    per_step, total = accountant(config, len(train_set))
    return RunRecord(
        final_weights=final,
        averaged_weights=averaged,
        test_accuracy_final=accuracy(final, test_set.X, test_set.y),
        test_accuracy_averaged=accuracy(averaged, test_set.X, test_set.y),
        realized_total_epsilon=total,
        per_step_epsilon=per_step,
        wallclock=time.perf_counter() - start,
    )


def _no_privacy(config, n):
    return math.inf, math.inf


def _gaussian_accountant(delta: float, kind: str):
    """Budget of the Gaussian baselines for noise multiplier sigma / rho.

    ``equal`` reports the classical per-step epsilon composed by T*m/n;
    ``rdp`` reports the subsampled-Gaussian Renyi bound, which has no
    per-step value (NaN).
    """

    def account(config, n):
        if config.iters == 0:
            return math.nan, 0.0
        if config.sigma == 0:
            return math.inf, math.inf
        multiplier = config.sigma / config.rho
        if kind == "equal":
            step = privacy.gaussian_baseline_epsilon(multiplier, delta)
            return step, step * config.iters * config.batch / n
        return math.nan, privacy.rdp_epsilon(multiplier, delta, config.batch / n, config.iters)

    return account


def _rqp_accountant(config, n):
    if config.iters == 0:
        return 0.0, 0.0
    if config.q < 1.0 / (config.grid.size - 1):
        # below the range the closed form is stated for
        return math.nan, math.nan
    p = privacy.PrivacyParams(
        bits=config.grid.bits, q=config.q, sigma=config.sigma, eta=config.eta,
        batch=config.batch, n=n, iters=config.iters, bound=config.grid.bound, rho=config.rho,
    )
    eps_t = privacy.per_step_epsilon(p).epsilon_t
    return eps_t, config.iters * config.batch / n * eps_t


def sgd_train(config, train_set, test_set, init=None) -> RunRecord:
    _expect(config, "sgd")
    return _train(config, train_set, test_set, init, _no_privacy)


def dp_sgd_train(config, train_set, test_set, init=None, delta: float = 1e-7, accountant: str = "rdp") -> RunRecord:
    _expect(config, "dp_sgd")
    return _train(config, train_set, test_set, init, _gaussian_accountant(delta, accountant))


def proj_dp_sgd_train(config, train_set, test_set, init=None, delta: float = 1e-7, accountant: str = "rdp") -> RunRecord:
    _expect(config, "proj_dp_sgd")
    return _train(config, train_set, test_set, init, _gaussian_accountant(delta, accountant))


def rqp_sgd_train(config, train_set, test_set, init=None) -> RunRecord:
    _expect(config, "rqp_sgd")
    return _train(config, train_set, test_set, init, _rqp_accountant)


TRAINERS = {
    "sgd": sgd_train,
    "dp_sgd": dp_sgd_train,
    "proj_dp_sgd": proj_dp_sgd_train,
    "rqp_sgd": rqp_sgd_train,
}


def train(config, train_set, test_set, init=None, delta: float = 1e-7, accountant: str = "rdp") -> RunRecord:
    """Dispatch on ``config.algorithm``; delta and accountant only matter for the Gaussian baselines."""
    if config.algorithm in ("dp_sgd", "proj_dp_sgd"):
        return TRAINERS[config.algorithm](config, train_set, test_set, init, delta=delta, accountant=accountant)
    return TRAINERS[config.algorithm](config, train_set, test_set, init)


def _expect(config: TrainConfig, algorithm: str) -> None:
    if config.algorithm != algorithm:
        raise ValueError(f"config is for {config.algorithm}, not {algorithm}")
