import numpy as np
import pytest
from hypothesis import settings

from lipsub.mesh import MaterialParams, bar_2d, bar_3d, build_mesh, cloth_grid

settings.register_profile("lipsub", deadline=None, max_examples=30)
settings.load_profile("lipsub")


def central_fd(f, x, h):
    """Central differences of a scalar or vector function, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def perturbed(q, rng, scale=0.05):
    return q + scale * rng.standard_normal(q.shape)


@pytest.fixture
def mat():
    return MaterialParams(mu=1.0, lam=2.0, density=1.0)


@pytest.fixture
def small_bar():
    return bar_2d(4, 2, 1.0, 0.5, pinned=[0, 5, 10])


@pytest.fixture
def small_tet():
    return bar_3d(1, 1, 1, (1.0, 1.0, 1.0), pinned=[0])


@pytest.fixture
def small_cloth():
    return cloth_grid(2, 2, 1.0, 1.0, pinned=[0])


def unit_tet():
    return build_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
