import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ticketlab.data import synth_dataset
from ticketlab.network import ModelConfig, build
from ticketlab.tensor import make_rng

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_model():
    params, specs = build(ModelConfig(width=4, depth=2), make_rng(0))
    return params


@pytest.fixture
def tiny_data():
    return synth_dataset(120, 4, 8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
