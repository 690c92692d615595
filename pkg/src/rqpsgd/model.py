"""Linear classifiers: convex losses, analytic per-example gradients, clipping, accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSSES = ("logistic", "hinge", "softmax", "squared")  # squared: least squares, for toy checks


@dataclass
class LinearModel:
    weights: np.ndarray  # (classes, features); classes == 1 for binary losses
    bound: float | None = None

    @property
    def classes(self) -> int:
        return self.weights.shape[0]

    @property
    def features(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, classes: int, features: int, bound: float | None = None) -> "LinearModel":
        return cls(np.zeros((classes, features)), bound)


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


def weight_rows(loss: str, classes: int) -> int:
    """Rows of the weight matrix a loss needs for ``classes`` labels."""
    if loss == "softmax":
        return classes
    if loss == "squared":
        return 1
    if loss in ("logistic", "hinge"):
        if classes != 2:
            raise ValueError(f"{loss} loss is binary; got {classes} classes")
        return 1
    raise ValueError(f"unknown loss {loss!r}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(W: np.ndarray, X: np.ndarray, loss: str) -> None:
    if X.shape[-1] != W.shape[1]:
        raise ValueError(f"feature length {X.shape[-1]} does not match model width {W.shape[1]}")
    if loss in ("logistic", "hinge", "squared") and W.shape[0] != 1:
        raise ValueError(f"{loss} loss needs a single weight row, got {W.shape[0]}")
    if loss == "softmax" and W.shape[0] < 2:
        raise ValueError("softmax loss needs at least two classes")


def losses(loss: str, W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example loss values for a batch."""
    X = np.atleast_2d(X)
    y = np.atleast_1d(y)
    _check(W, X, loss)
    if loss == "logistic":
        s = X @ W[0]
        # log(1 + e^s) - y*s, stable for large |s|
        return np.logaddexp(0.0, s) - y * s
    if loss == "hinge":
        s = X @ W[0]
        sign = 2.0 * y - 1.0
        return np.maximum(0.0, 1.0 - sign * s)
    if loss == "softmax":
        scores = X @ W.T
        lse = scores.max(axis=1) + np.log(np.exp(scores - scores.max(axis=1, keepdims=True)).sum(axis=1))
        return lse - scores[np.arange(len(y)), y]
    if loss == "squared":
        return 0.5 * (X @ W[0] - y) ** 2
    raise ValueError(f"unknown loss {loss!r}")


def per_example_grads(loss: str, W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradients of each example's loss w.r.t. W, shape (batch, classes, features)."""
    X = np.atleast_2d(X)
    y = np.atleast_1d(y)
    _check(W, X, loss)
    if loss == "logistic":
        r = _sigmoid(X @ W[0]) - y
        return (r[:, None] * X)[:, None, :]
    if loss == "hinge":
        sign = 2.0 * y - 1.0
        # the kink (margin exactly 1) takes the zero subgradient
        active = sign * (X @ W[0]) < 1.0
        return (np.where(active, -sign, 0.0)[:, None] * X)[:, None, :]
    if loss == "softmax":
        r = _softmax(X @ W.T)
        r[np.arange(len(y)), y] -= 1.0
        return r[:, :, None] * X[:, None, :]
    if loss == "squared":
        return ((X @ W[0] - y)[:, None] * X)[:, None, :]
    raise ValueError(f"unknown loss {loss!r}")


def logistic_grad(model: LinearModel, ex: Example) -> np.ndarray:
    return per_example_grads("logistic", model.weights, ex.features, ex.label)[0]


def hinge_grad(model: LinearModel, ex: Example) -> np.ndarray:
    return per_example_grads("hinge", model.weights, ex.features, ex.label)[0]


def softmax_grad(model: LinearModel, ex: Example) -> np.ndarray:
    return per_example_grads("softmax", model.weights, ex.features, ex.label)[0]


def clip_gradient(g: np.ndarray, rho: float) -> np.ndarray:
    """Rescale so the Frobenius norm is at most rho. Works on a stack of gradients too."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    if g.ndim <= 2:
        norm = np.linalg.norm(g)
        return g if norm <= rho else g * (rho / norm)
    norms = np.sqrt((g * g).reshape(len(g), -1).sum(axis=1))
    scale = np.where(norms > rho, rho / np.where(norms > 0, norms, 1.0), 1.0)
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


def predict(model: LinearModel, X) -> np.ndarray:
    """Class ids. Binary: score >= 0 is class 1. Multiclass: argmax, lowest index wins ties."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    scores = X @ model.weights.T
    if model.classes == 1:
        return (scores[:, 0] >= 0.0).astype(np.int64)
    return np.argmax(scores, axis=1)


def accuracy(model: LinearModel, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty example set")
    return float(np.mean(predict(model, X) == y))


def save_model(path, model: LinearModel, bits=None, q=None, seed=None) -> None:
    """Text format: header ``classes d M b q seed`` then ``class feature value`` per weight."""
    fmt = lambda v: "none" if v is None else repr(v)
    with open(path, "w") as f:
        f.write(f"{model.classes} {model.features} {fmt(model.bound)} {fmt(bits)} {fmt(q)} {fmt(seed)}\n")
        for k in range(model.classes):
            for j in range(model.features):
                f.write(f"{k} {j} {float(model.weights[k, j])!r}\n")


def load_model(path) -> tuple[LinearModel, dict]:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 6:
            raise ValueError(f"{path}: malformed model header")
        classes, d = int(header[0]), int(header[1])
        parse = lambda s, cast: None if s == "none" else cast(s)
        meta = {"bound": parse(header[2], float), "bits": parse(header[3], int),
                "q": parse(header[4], float), "seed": parse(header[5], int)}
        W = np.zeros((classes, d))
        seen = 0
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'class feature value'")
            W[int(parts[0]), int(parts[1])] = float(parts[2])
            seen += 1
        if seen != classes * d:
            raise ValueError(f"{path}: expected {classes * d} weights, found {seen}")
    return LinearModel(W, meta["bound"]), meta
