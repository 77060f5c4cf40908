import numpy as np
import pytest

from reponet.graph_store import CovariateTable, DependencyGraph


def random_graph(rng, n, p):
    adj = (rng.random((n, n)) < p).astype(np.int64)
    np.fill_diagonal(adj, 0)
    return DependencyGraph.from_adjacency(adj, [f"r{i}" for i in range(n)])


def random_covariates(rng, n, num_cov, levels=3):
    codes = rng.integers(0, levels, size=(n, num_cov))
    return CovariateTable([f"x{q}" for q in range(num_cov)], codes, None, [levels] * num_cov)


def chain():
    # a depends on b, b depends on c
    return DependencyGraph.from_edges(["a", "b", "c"], [0, 1], [1, 2])


def planted_sbm(rng, sizes, p_in, p_out):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    adj = (rng.random((n, n)) < prob).astype(np.int64)
    np.fill_diagonal(adj, 0)
    return DependencyGraph.from_adjacency(adj), labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
