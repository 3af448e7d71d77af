import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(f, x, step=1e-6):
    """Central differences of a scalar function of (N, d) points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = np.empty_like(x)
    for k in range(x.shape[1]):
        s = step * (1.0 + np.abs(x[:, k]))
        xp, xm = x.copy(), x.copy()
        xp[:, k] += s
        xm[:, k] -= s
        g[:, k] = (f(xp) - f(xm)) / (xp[:, k] - xm[:, k])
    return g


# one "ACn PASS|FAIL ..." line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
