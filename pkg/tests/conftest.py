import numpy as np
import pytest

from bracketgnn.graph import Graph
from bracketgnn.synthetic import SyntheticConfig, build_dataset, delaunay_graph


def triangle():
    return Graph(3, [(0, 1), (1, 2), (0, 2)], [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])


def path3():
    return Graph(3, [(0, 1), (1, 2)], [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])


def random_graph(n, seed):
    """Delaunay graph on ``n`` uniform random points."""
    rng = np.random.default_rng(seed)
    return delaunay_graph(rng.uniform(0, 1, size=(n, 2)))


@pytest.fixture
def tri():
    return triangle()


@pytest.fixture
def path():
    return path3()


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SyntheticConfig(num_nodes=36, num_realizations=5, num_snapshots=2, seed=3, n_val=1, n_test=1)
    return build_dataset(cfg)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance")
    for line in mod.REPORT:
        terminalreporter.write_line(line)
