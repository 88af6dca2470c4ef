import numpy as np
import pytest

from sparsevc.datamodel import LongitudinalDataset
from sparsevc.kernel import KernelSpec, build_blocks

SOBOLEV = KernelSpec("sobolev1")


def make_dataset(ids, times, y, X, names=None, divisor=1.0):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = names or [f"x{j + 1}" for j in range(X.shape[1])]
    return LongitudinalDataset.from_arrays(ids, times, y, X, names, divisor)


def example_a():
    """Two visits of one subject, ``x = 1``, ``y = (0, 3)`` at ``t = (0, 1)``."""
    return make_dataset(["a", "a"], [0.0, 1.0], [0.0, 3.0], [[1.0], [1.0]])


def random_instance(rng, n_max=4, m_max=3, p_max=3, n_min=1):
    """Small random cohort on a coarse time grid with Gaussian covariates."""
    n = int(rng.integers(n_min, n_max + 1))
    p = int(rng.integers(1, p_max + 1))
    grid = np.linspace(0.0, 1.0, 9)
    ids, times = [], []
    for i in range(n):
        m = int(rng.integers(1, m_max + 1))
        for t in np.sort(rng.choice(grid, size=m, replace=False)):
            ids.append(f"s{i}")
            times.append(float(t))
    N = len(times)
    X = rng.standard_normal((N, p))
    y = rng.standard_normal(N) * rng.uniform(0.5, 3.0) + rng.uniform(-2, 2)
    ds = make_dataset(ids, times, y, X)
    return ds, build_blocks(SOBOLEV, ds)


def rel_close(a, b, tol):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(1.0, float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    return float(np.max(np.abs(a - b), initial=0.0)) <= tol * scale


@pytest.fixture
def ds_a():
    return example_a()


@pytest.fixture
def blocks_a(ds_a):
    return build_blocks(SOBOLEV, ds_a)


# acceptance criteria report one line each; collected here and echoed at the end
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
