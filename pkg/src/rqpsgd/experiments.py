"""Seeded experiment sweeps behind the CLI: the accuracy table, the q/sigma
trade-off sweep and the utility-bound curves.

Every sweep is a pure function of its arguments. Repeated runs use seeds
``base_seed + i`` and are collected by run index, so thread scheduling never
changes the output.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import privacy
from .bounds import UtilityParams, tradeoff_curve
from .data import Dataset, load_mnist, load_wdbc, split, standardize
from .quantizer import make_grid
from .train import TrainConfig, train

TABLE1_ALGORITHMS = ("sgd", "dp_sgd", "proj_dp_sgd", "rqp_sgd")
LOSS_NAMES = {"logreg": "logistic", "svm": "hinge"}


@dataclass(frozen=True)
class Setting:
    """Hyperparameters shared by every algorithm in one table cell."""

    eta: float
    batch: int
    iters: int
    rho: float = 0.45
    bound: float = 0.3
    bits: int = 4


DIAGNOSTIC = Setting(eta=1.0, batch=10, iters=46)
MNIST = Setting(eta=1.0, batch=64, iters=938)

DEFAULT_EPSILON = 1.0
DEFAULT_DELTA = 1e-7
DEFAULT_RQP_Q = 0.95
TRAIN_FRACTION = 0.8


@dataclass
class Cell:
    dataset: str
    model: str
    algorithm: str
    accuracies: list
    epsilon: float
    delta: float
    q: float
    sigma: float

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def prepare_wdbc(path, split_seed: int = 0) -> tuple[Dataset, Dataset]:
    """80/20 seeded split, z-scored with train statistics."""
    tr, te = split(load_wdbc(path), TRAIN_FRACTION, split_seed)
    tr, te, _ = standardize(tr, te)
    return tr, te


def prepare_mnist(directory) -> tuple[Dataset, Dataset]:
    """The official 60k/10k files; pixels are already in [0, 1]."""
    import os

    j = lambda f: os.path.join(directory, f)
    tr = load_mnist(j("train-images-idx3-ubyte"), j("train-labels-idx1-ubyte"), "mnist-train")
    te = load_mnist(j("t10k-images-idx3-ubyte"), j("t10k-labels-idx1-ubyte"), "mnist-test")
    return tr, te


def privacy_params(s: Setting, n: int, q: float = 1.0, sigma: float = 0.0) -> privacy.PrivacyParams:
    return privacy.PrivacyParams(
        bits=s.bits, q=q, sigma=sigma, eta=s.eta, batch=s.batch, n=n,
        iters=s.iters, bound=s.bound, rho=s.rho,
    )


def baseline_sigma(s: Setting, n: int, epsilon: float, delta: float, accountant: str) -> float:
    """Std of the noise on the clipped gradient sum for the Gaussian baselines."""
    mult = privacy.baseline_noise_multiplier(epsilon, delta, s.batch / n, s.iters, accountant)
    return mult * s.rho


def rqp_noise(s: Setting, n: int, epsilon: float, q: float | None, sigma: float | None) -> tuple[float, float]:
    """Fill in whichever of (q, sigma) is missing so one step composes to epsilon."""
    if q is not None and sigma is not None:
        return q, sigma
    if sigma is not None:
        return privacy.solve_q(epsilon, privacy_params(s, n, sigma=sigma)), sigma
    q = DEFAULT_RQP_Q if q is None else q
    return q, privacy.solve_sigma(epsilon, privacy_params(s, n, q=q))


def repeat(configs, train_set, test_set, workers: int = 1, **kw) -> list:
    """Train each config; results come back in input order."""
    job = lambda c: train(c, train_set, test_set, **kw)
    if workers <= 1:
        return [job(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, configs))


def seeded(base: TrainConfig, repeats: int, base_seed: int) -> list:
    return [replace(base, seed=base_seed + i) for i in range(repeats)]


def algorithm_config(algorithm: str, s: Setting, loss: str, sigma: float = 0.0, q: float | None = None) -> TrainConfig:
    grid = make_grid(s.bound, s.bits) if algorithm in ("proj_dp_sgd", "rqp_sgd") else None
    return TrainConfig(
        algorithm=algorithm, eta=s.eta, batch=s.batch, iters=s.iters, rho=s.rho, loss=loss,
        sigma=sigma if algorithm != "sgd" else 0.0, grid=grid,
        q=q if algorithm == "rqp_sgd" else None,
    )


def table1_cell(dataset: str, model: str, algorithm: str, s: Setting, train_set, test_set, *,
                epsilon=DEFAULT_EPSILON, delta=DEFAULT_DELTA, rqp_q=None, rqp_sigma=None,
                accountant="rdp", repeats=10, base_seed=42, workers=1) -> Cell:
    n = len(train_set)
    loss = "softmax" if train_set.classes > 2 else LOSS_NAMES[model]
    q = sigma = math.nan
    eps, dlt = math.inf, math.nan
    if algorithm == "sgd":
        cfg = algorithm_config("sgd", s, loss)
    elif algorithm in ("dp_sgd", "proj_dp_sgd"):
        sigma = baseline_sigma(s, n, epsilon, delta, accountant)
        eps, dlt = epsilon, delta
        cfg = algorithm_config(algorithm, s, loss, sigma=sigma)
    else:
        q, sigma = rqp_noise(s, n, epsilon, rqp_q, rqp_sigma)
        eps, dlt = epsilon, 0.0
        cfg = algorithm_config("rqp_sgd", s, loss, sigma=sigma, q=q)
    if algorithm == "proj_dp_sgd":
        q = 1.0
    runs = repeat(seeded(cfg, repeats, base_seed), train_set, test_set, workers,
                  delta=delta, accountant=accountant)
    accs = [100.0 * r.test_accuracy_final for r in runs]
    return Cell(dataset, model, algorithm, accs, eps, dlt, q, sigma)


def table1(datasets: dict, *, repeats=10, base_seed=42, workers=1, epsilon=DEFAULT_EPSILON,
           delta=DEFAULT_DELTA, rqp_q=None, rqp_sigma=None, accountant="rdp",
           algorithms=TABLE1_ALGORITHMS) -> list[Cell]:
    """``datasets`` maps 'diagnostic' and/or 'mnist' to (train, test) pairs."""
    plan = []
    if "diagnostic" in datasets:
        plan += [("diagnostic", "logreg", DIAGNOSTIC), ("diagnostic", "svm", DIAGNOSTIC)]
    if "mnist" in datasets:
        plan.append(("mnist", "logreg", MNIST))
    cells = []
    for name, model, s in plan:
        tr, te = datasets[name]
        for alg in algorithms:
            cells.append(table1_cell(
                name, model, alg, s, tr, te, epsilon=epsilon, delta=delta, rqp_q=rqp_q,
                rqp_sigma=rqp_sigma, accountant=accountant, repeats=repeats,
                base_seed=base_seed, workers=workers))
    return cells


@dataclass
class TradeoffRow:
    sigma: float
    q: float
    attainable: bool
    accuracies: list = field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies)) if self.accuracies else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else math.nan


TRADEOFF_TOP_Q = 0.99
TRADEOFF_POINTS = 12
TRADEOFF_SIGMA_MIN = 0.5


def default_sigma_grid(epsilon: float, bits: int, s: Setting, n: int) -> list[float]:
    """Geometric from 0.5 up to the sigma where the solved q reaches 0.99.

    Larger sigmas would need q >= 1 to stay at epsilon, so every point on
    this grid is attainable whenever sigma = 0.5 is.
    """
    top = privacy.solve_sigma(epsilon, privacy_params(s, n, q=TRADEOFF_TOP_Q).with_(bits=bits))
    lo = min(TRADEOFF_SIGMA_MIN, top)
    return [float(v) for v in np.geomspace(lo, top, TRADEOFF_POINTS)]


def tradeoff(train_set, test_set, *, epsilon: float, bits: int, sigma_grid=None, model="logreg",
             setting: Setting = DIAGNOSTIC, repeats=10, base_seed=42, workers=1) -> list[TradeoffRow]:
    """Per sigma, solve q for total epsilon and train RQP-SGD ``repeats`` times."""
    s = Setting(setting.eta, setting.batch, setting.iters, setting.rho, setting.bound, bits)
    n = len(train_set)
    if sigma_grid is None:
        sigma_grid = default_sigma_grid(epsilon, bits, s, n)
    rows = []
    for sigma in sigma_grid:
        try:
            q = privacy.solve_q(epsilon, privacy_params(s, n, sigma=sigma))
        except privacy.UnattainableTargetError:
            rows.append(TradeoffRow(sigma, math.nan, False))
            continue
        if not q < 1.0:
            rows.append(TradeoffRow(sigma, q, False))
            continue
        cfg = algorithm_config("rqp_sgd", s, LOSS_NAMES[model], sigma=sigma, q=q)
        runs = repeat(seeded(cfg, repeats, base_seed), train_set, test_set, workers)
        rows.append(TradeoffRow(sigma, q, True, [100.0 * r.test_accuracy_final for r in runs]))
    return rows


CURVE_EPSILONS = (0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0)
CURVE_SETTING = dict(d=30, bound=0.3, eta=1.0, rho=0.45, iters=445, bits=4, batch=1, n=445)


def bound_curves(q: float, epsilon_grid=CURVE_EPSILONS, delta: float = DEFAULT_DELTA, **overrides):
    """Both utility-bound curves (rqp at this q, proj_dp at q = 1)."""
    cfg = dict(CURVE_SETTING, **overrides)
    base = UtilityParams(d=cfg["d"], bound=cfg["bound"], eta=cfg["eta"], rho=cfg["rho"], sigma=0.0,
                         iters=cfg["iters"], bits=cfg["bits"], q=q)
    pp = privacy.PrivacyParams(bits=cfg["bits"], q=q, sigma=1.0, eta=cfg["eta"], batch=cfg["batch"],
                               n=cfg["n"], iters=cfg["iters"], bound=cfg["bound"], rho=cfg["rho"])
    return (tradeoff_curve(base, pp, epsilon_grid, "rqp")
            + tradeoff_curve(base, pp, epsilon_grid, "proj_dp", delta=delta))
