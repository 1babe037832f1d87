import os

import numpy as np
import pytest

from odtq.roadnet import RoadNetwork
from odtq.synthgen import DataConfig, build_dataset, generate_grid_network

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(ROOT, "configs")

# lines collected by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid3():
    return generate_grid_network(3, 3, 100.0, seed=0)


@pytest.fixture(scope="session")
def grid5():
    return generate_grid_network(5, 5, 500.0, seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(DataConfig(rows=4, cols=4, n_trips=300, seed=3))


@pytest.fixture
def chain2():
    return RoadNetwork(np.array([[0.0, 0.0], [1.0, 0.0]]), [(0, 1, 100.0)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
