import numpy as np
import pytest

from corrnoise import se2


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + n * np.eye(n))


def random_poses(rng, size, max_angle=np.pi - 1e-3, spread=3.0):
    xyt = np.column_stack([
        rng.uniform(-spread, spread, size=size),
        rng.uniform(-spread, spread, size=size),
        rng.uniform(-max_angle, max_angle, size=size),
    ])
    return se2.from_xyt(xyt)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {}


def record_criterion(number, passed, detail):
    """Remember and print one PASS/FAIL line for an acceptance criterion."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    CRITERIA[str(number)] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int(k.split()[0]), k)):
        terminalreporter.write_line(CRITERIA[key])
