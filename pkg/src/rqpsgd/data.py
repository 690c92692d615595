"""Loaders for the WDBC (breast cancer diagnostic) CSV and MNIST IDX files, plus splitting and scaling."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

WDBC_FEATURES = 30
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    classes: int
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise DataError("features must be (n, d) with one label per row")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name=None) -> "Dataset":
        return Dataset(name or self.name, self.X[idx], self.y[idx], self.classes, dict(self.normalization))


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_wdbc(path) -> Dataset:
    """Parse ``wdbc.data`` (id, diagnosis, 30 floats) or the headered CSV variant.

    Malignant maps to 1, benign to 0.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or all(not r for r in rows):
        raise DataError(f"{path}: empty file")
    start = 0
    first = [c.strip() for c in rows[0]]
    if len(first) > 1 and not _is_number(first[0]) and first[1] not in ("M", "B"):
        start = 1
    X, y = [], []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        row = [c.strip() for c in row]
        # the headered export carries a trailing empty column
        while row and row[-1] == "":
            row.pop()
        if not row:
            continue
        if len(row) != WDBC_FEATURES + 2:
            raise DataError(f"{path}:{lineno}: expected {WDBC_FEATURES + 2} columns, got {len(row)}")
        label = row[1].strip('"')
        if label not in ("M", "B"):
            raise DataError(f"{path}:{lineno}: diagnosis must be M or B, got {label!r}")
        try:
            feats = [float(v) for v in row[2:]]
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
        if not all(math.isfinite(v) for v in feats):
            raise DataError(f"{path}:{lineno}: non-finite feature")
        X.append(feats)
        y.append(1 if label == "M" else 0)
    if not X:
        raise DataError(f"{path}: no data rows")
    return Dataset("wdbc", np.asarray(X, dtype=float), np.asarray(y, dtype=np.int64), 2)


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = math.prod(dims)
    payload = raw[header:]
    if len(payload) < need:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header declares {need}")
    return dims, payload[:need]


def load_mnist(images_path, labels_path, name: str = "mnist") -> Dataset:
    dims, pixels = _read_idx(images_path, IMAGE_MAGIC)
    (count,), labels = _read_idx(labels_path, LABEL_MAGIC)
    if dims[0] != count:
        raise CountMismatchError(f"{dims[0]} images but {count} labels")
    X = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], -1).astype(float) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    if y.size and y.max() > 9:
        raise DataError(f"{labels_path}: label {y.max()} outside 0..9")
    return Dataset(name, X, y, 10, {"scale": 1.0 / 255.0})


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first floor(fraction * n) rows train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction!r}")
    n_train = math.floor(train_fraction * len(ds))
    if n_train == 0 or n_train == len(ds):
        raise ValueError(f"split of {len(ds)} rows at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(perm[:n_train], f"{ds.name}-train"), ds.subset(perm[n_train:], f"{ds.name}-test")


STD_FLOOR = 1e-12


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, dict]:
    """z-score both sides with train-set mean and std."""
    mean = train.X.mean(axis=0)
    std = np.maximum(train.X.std(axis=0), STD_FLOOR)
    stats = {"mean": mean, "std": std}
    out = []
    for ds in (train, test):
        norm = dict(ds.normalization, **stats)
        out.append(Dataset(ds.name, (ds.X - mean) / std, ds.y, ds.classes, norm))
    return out[0], out[1], stats


def save_dataset(path, ds: Dataset) -> None:
    extra = {f"norm_{k}": np.asarray(v) for k, v in ds.normalization.items()}
    np.savez(path, X=ds.X, y=ds.y, classes=ds.classes, name=ds.name, **extra)


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        norm = {k[5:]: z[k] for k in z.files if k.startswith("norm_")}
        norm = {k: (v.item() if v.ndim == 0 else v) for k, v in norm.items()}
        return Dataset(str(z["name"]), z["X"], z["y"], int(z["classes"]), norm)
