import numpy as np
import pytest

from smoothtails.models import ModelSpec, lognormal_reference


@pytest.fixture(scope="session")
def lognormal():
    """Similarity model with m(s) = 1 at s = 1 and s = 3."""
    return lognormal_reference(beta=3.0, alpha=1.0)


@pytest.fixture(scope="session")
def maxwell():
    return ModelSpec.maxwell(d=3)


@pytest.fixture(scope="session")
def gaussian2():
    return ModelSpec("general", 2, 2, {"c.scale": 0.4})


@pytest.fixture(scope="session")
def diagonal():
    return ModelSpec.diagonal(d=2)


def lognormal_m(s, mu, sigma, N=2):
    """N E[t^s] for log t ~ Normal(mu, sigma^2)."""
    return N * np.exp(mu * s + 0.5 * sigma ** 2 * s ** 2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
