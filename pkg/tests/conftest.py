import os

import numpy as np
import pytest

from dp2vae.data_io import load_dataset
from dp2vae.nn import DenseNet
from dp2vae.numerics import RngStream, tune_allocator

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(ROOT, "data")

DESK_TRAIN = (os.path.join(DATA, "desk-train-images-idx3-ubyte.gz"),
              os.path.join(DATA, "desk-train-labels-idx1-ubyte.gz"))
DESK_TEST = (os.path.join(DATA, "desk-test-images-idx3-ubyte.gz"),
             os.path.join(DATA, "desk-test-labels-idx1-ubyte.gz"))


@pytest.fixture(scope="session")
def mnist_train():
    return load_dataset(*DESK_TRAIN)


@pytest.fixture(scope="session")
def mnist_test():
    return load_dataset(*DESK_TEST)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences, every coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return RngStream(1234, 0)


def pytest_configure(config):
    tune_allocator()


# acceptance summary: one line per criterion-marked test

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
