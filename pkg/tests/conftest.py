import sys

import numpy as np
import pytest

from rlcert.env import GridWorld, ToyFreeway
from rlcert.qfunc import value_iteration


@pytest.fixture(scope="session")
def grid_env_q():
    env = GridWorld(5)
    return env, value_iteration(env.tabular_model(), 0.9)


@pytest.fixture(scope="session")
def freeway_env_q():
    env = ToyFreeway()
    return env, value_iteration(env.tabular_model(), 0.9)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
