"""Uniform b-bit quantization grid with clipping, nearest-level and randomized projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BITS = 16


@dataclass(frozen=True)
class QuantizationGrid:
    bound: float
    bits: int
    levels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.levels)

    @property
    def spacing(self) -> float:
        return 2.0 * self.bound / (self.size - 1)

    def contains(self, w) -> bool:
        """True if every entry of ``w`` is exactly one of the grid levels."""
        w = np.asarray(w, dtype=float).ravel()
        idx = np.clip(np.searchsorted(self.levels, w), 0, self.size - 1)
        return bool(np.all(self.levels[idx] == w))


def make_grid(M: float, b: int) -> QuantizationGrid:
    if not (np.isfinite(M) and M > 0):
        raise ValueError(f"grid bound must be positive, got {M!r}")
    if int(b) != b or not 1 <= b <= MAX_BITS:
        raise ValueError(f"bits must be an integer in [1, {MAX_BITS}], got {b!r}")
    b = int(b)
    n = 2**b
    i = np.arange(n, dtype=float)
    levels = -M + (2.0 * M / (n - 1)) * i
    levels.setflags(write=False)
    return QuantizationGrid(bound=float(M), bits=b, levels=levels)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value passed to quantizer")


def clip(x, M: float):
    """Clip into [-M, M]. Scalars in, scalars out."""
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)):
        raise ValueError("NaN passed to clip")
    out = np.minimum(np.maximum(arr, -M), M)
    return float(out) if out.ndim == 0 else out


def nearest_index(grid: QuantizationGrid, x) -> np.ndarray:
    """Index of the nearest level to clip(x); exact midpoints go to the higher level."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    x = np.minimum(np.maximum(x, -grid.bound), grid.bound)
    levels = grid.levels
    top = grid.size - 1
    centre = np.clip(np.rint((x + grid.bound) / grid.spacing).astype(np.int64), 0, top)
    # levels come from a non-symmetric float expression, so distances that
    # differ by a few ulps count as a tie; ties resolve to the higher level
    tol = 8.0 * np.finfo(float).eps * grid.bound
    idx = np.minimum(centre + 1, top)
    best = np.abs(levels[idx] - x)
    for cand in (centre, np.maximum(centre - 1, 0)):
        d = np.abs(levels[cand] - x)
        better = d + tol < best
        idx = np.where(better, cand, idx)
        best = np.where(better, d, best)
    return idx


def project_deterministic(grid: QuantizationGrid, x):
    idx = nearest_index(grid, x)
    out = grid.levels[idx]
    return float(out) if out.ndim == 0 else out


def check_q(grid: QuantizationGrid, q: float) -> None:
    """The quantizer itself only needs a probability strictly inside (0, 1)."""
    if not (0.0 < q < 1.0):
        raise ValueError(f"randomness coefficient q must lie in (0, 1), got {q!r}")


def randomized_from_uniforms(grid: QuantizationGrid, q: float, idx: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Map nearest-level indices plus one uniform each to output levels.

    ``u < q`` keeps the nearest level; otherwise the remaining mass is split
    evenly over the other ``2^b - 1`` levels.
    """
    others = grid.size - 1
    k = np.floor((u - q) / (1.0 - q) * others).astype(np.int64)
    k = np.clip(k, 0, others - 1)
    alt = np.where(k < idx, k, k + 1)
    return grid.levels[np.where(u < q, idx, alt)]


def project_randomized(grid: QuantizationGrid, q: float, x, rng: np.random.Generator):
    check_q(grid, q)
    idx = nearest_index(grid, x)
    u = rng.random(size=idx.shape) if idx.ndim else rng.random()
    out = randomized_from_uniforms(grid, q, np.asarray(idx), np.asarray(u))
    return float(out) if out.ndim == 0 else out


def project_vector(grid: QuantizationGrid, q, w, rng=None, mode: str = "deterministic") -> np.ndarray:
    """Project every coordinate of ``w`` onto the grid.

    Randomized mode consumes exactly one uniform per coordinate, in C order.
    """
    w = np.asarray(w, dtype=float)
    if mode == "deterministic":
        return grid.levels[nearest_index(grid, w)]
    if mode == "randomized":
        check_q(grid, q)
        idx = nearest_index(grid, w)
        u = rng.random(size=w.shape)
        return randomized_from_uniforms(grid, q, idx, u)
    raise ValueError(f"unknown projection mode {mode!r}")
