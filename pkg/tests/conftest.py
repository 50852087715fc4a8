import numpy as np
import pytest

from augcontact.mesh import SimMesh, box_tets


def random_tet(rng, scale=1.0):
    """Well-shaped positively oriented tet near the unit simplex."""
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float) + 0.15 * rng.standard_normal((4, 3))
    if np.linalg.det(np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], 1)) < 0:
        p[[1, 2]] = p[[2, 1]]
    return scale * p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_block():
    p, t = box_tets(2, 1, 1, (2.0, 1.0, 1.0))
    return SimMesh.from_arrays(p, t, density=1000.0)


@pytest.fixture
def acceptance(request):
    """report(n, ok, detail): prints and records one PASS/FAIL line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
        lines[n] = line
        print(line)
        assert ok, line

    return report


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
