import numpy as np
import pytest

from delome.graph import SbmParams, SparseGraph, generate_sbm
from delome.taskstream import build_stream


def clique(n, offset=0):
    return [(offset + i, offset + j) for i in range(n) for j in range(i + 1, n)]


def cycle(n):
    return [(i, (i + 1) % n) for i in range(n)]


def random_graph(rng, n, p, f=3, n_classes=3):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return SparseGraph.from_edges(n, edges, rng.normal(size=(n, f)),
                                  rng.integers(0, n_classes, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sbm_graph():
    return generate_sbm(SbmParams([50] * 8, 0.2, 0.01, 16, 1.0, seed=0))


@pytest.fixture(scope="session")
def sbm_stream(sbm_graph):
    return build_stream(sbm_graph, 2, seed=0)


@pytest.fixture(scope="session")
def separable_task():
    g = generate_sbm(SbmParams([40, 40], 0.2, 0.01, 8, 4.0, seed=3))
    return build_stream(g, 2, seed=3)[0]


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
