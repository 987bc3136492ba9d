import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pexcite import design, sim

settings.register_profile(
    "default",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.large_base_example, HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench():
    return design.benchmark_conditions()


@pytest.fixture(scope="session")
def omega(bench):
    return bench.omega


@pytest.fixture(scope="session")
def game():
    return sim.GameSpec()


@pytest.fixture(scope="session")
def plans(omega):
    return {name: design.reference_plan(name, omega) for name in design.REFERENCE_SIGNALS}


@pytest.fixture(scope="session")
def u11_trace(game, plans):
    """Full-resolution learning run under the first design, up to convergence."""
    return sim.run_recorded(game, plans["u11"], sim.SimConfig(horizon=1000.0), "u11", record_every=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
