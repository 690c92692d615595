import os

import numpy as np
import pytest

WDBC = os.environ.get("RQPSGD_WDBC", "/root/data/wdbc.data")
MNIST_DIR = os.environ.get("RQPSGD_MNIST_DIR", "/root/data/mnist")
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def have_wdbc() -> bool:
    return os.path.exists(WDBC)


def have_mnist() -> bool:
    return all(os.path.exists(os.path.join(MNIST_DIR, f)) for f in MNIST_FILES)


@pytest.fixture(scope="session")
def wdbc_path():
    if not have_wdbc():
        pytest.skip(f"WDBC file not found at {WDBC} (set RQPSGD_WDBC)")
    return WDBC


@pytest.fixture(scope="session")
def mnist_dir():
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set RQPSGD_MNIST_DIR)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def diagnostic(wdbc_path):
    from rqpsgd.experiments import prepare_wdbc

    return prepare_wdbc(wdbc_path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    groups: dict = {}
    for key in ACCEPTANCE:
        groups.setdefault(int(key.split(".")[0]), []).append(key)
    for n in sorted(groups):
        keys = sorted(groups[n])
        checks = [ACCEPTANCE[k] for k in keys]
        passed = sum(ok for ok, _ in checks)
        status = "PASS" if passed == len(checks) else "FAIL"
        if len(keys) == 1:
            terminalreporter.write_line(f"criterion {n}: {status}  {checks[0][1]}")
            continue
        terminalreporter.write_line(f"criterion {n}: {status}  ({passed}/{len(checks)} checks)")
        for k, (ok, detail) in zip(keys, checks):
            terminalreporter.write_line(f"    {k}: {'pass' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(key: str, ok: bool, detail: str):
        ACCEPTANCE[key] = (bool(ok), detail)
        assert ok, f"criterion {key}: {detail}"

    return record
