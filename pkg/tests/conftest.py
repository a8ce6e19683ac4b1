import numpy as np
import pytest

from warpfield.gplik import CovParams, SampleCov, build_sigma


def simulate_sample(g, n, params=CovParams(1.0, 0.0, 1.0), seed=0, coords=None):
    """Sample covariance of ``n`` draws from the stationary model on D-space points ``g``."""
    rng = np.random.default_rng(seed)
    S = build_sigma(g, params)
    Y = rng.multivariate_normal(np.zeros(len(g)), S, size=n, method="cholesky")
    return SampleCov.from_observations(Y, coords), Y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sites8():
    return np.random.default_rng(8).uniform(0, 1, (8, 2))


@pytest.fixture(scope="session")
def aniso_data():
    x = np.random.default_rng(1).uniform(0, 1, (15, 2))
    sample, Y = simulate_sample(x * [2.0, 0.5], 300, seed=2, coords=x)
    return x, sample, Y


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(number, passed, detail=""):
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
