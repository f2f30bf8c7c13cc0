import numpy as np
import pytest

from rbmonge.problem import builtin, parameter_set
from rbmonge.rom import TrainConfig, train
from rbmonge.truth import grid_for


@pytest.fixture(scope="session")
def rb1():
    return builtin("rb1")


@pytest.fixture(scope="session")
def small_model(rb1):
    """rb1 on 31^2 with three basis functions and a coarse training set."""
    grid = grid_for(rb1, 31)
    xi = parameter_set(["5:1.5:20"])
    return train(rb1, grid, TrainConfig(3, xi, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
