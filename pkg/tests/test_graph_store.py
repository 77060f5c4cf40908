import itertools
import logging

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reponet.errors import DataError
from reponet.graph_store import (
    DependencyGraph,
    degree_stats,
    detect_communities,
    discretize_quartiles,
    eigenvector_centrality,
    graph_stats,
    ingest_dependency_csv,
    largest_weak_component,
    load_graph,
    nearest_rank,
    read_labels_csv,
    save_graph,
    summarize,
    write_labels_csv,
)

from conftest import chain, random_covariates, random_graph


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ingestion

def test_ingest_drops_duplicates_and_self_loops(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "repo,size\na,1\nb,2\nc,3\n")
    edges = write(tmp_path / "edges.csv",
                  "source_repo,target_repo\na,b\na,b\nb,c\nc,c\n")
    g, cov = ingest_dependency_csv(edges, nodes)
    g.check_invariants()
    assert g.node_ids == ["a", "b", "c"]
    assert g.edge_count == 2
    assert g.has_edge(0, 1) and g.has_edge(1, 2)
    assert not g.has_edge(2, 2)
    assert cov.covariate_names == ["size"]


def test_ingest_unknown_repo_added_with_missing_covariates(tmp_path, caplog):
    nodes = write(tmp_path / "nodes.csv", "repo,size,stars\na,1,5\nb,2,6\n")
    edges = write(tmp_path / "edges.csv", "source_repo,target_repo\na,x\nx,b\n")
    with caplog.at_level(logging.WARNING):
        g, cov = ingest_dependency_csv(edges, nodes)
    assert g.node_ids == ["a", "b", "x"]
    assert np.isnan(cov.raw_values[2]).all()
    # missing values get the extra category q
    assert list(cov.codes[2]) == [4, 4]
    assert cov.num_categories == [5, 5]
    cov.check_invariants(3)
    assert any("x" in r.getMessage() for r in caplog.records)


def test_ingest_node_order_first_appearance(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "repo\nz\ny\n")
    edges = write(tmp_path / "edges.csv", "source_repo,target_repo\nq,y\np,q\n")
    g, _ = ingest_dependency_csv(edges, nodes)
    assert g.node_ids == ["z", "y", "q", "p"]


def test_ingest_malformed_row_reports_line(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "repo,size\na,1\nb,2\n")
    edges = write(tmp_path / "edges.csv", "source_repo,target_repo\na,b\na,b,c\n")
    with pytest.raises(DataError, match=r"edges.csv:3"):
        ingest_dependency_csv(edges, nodes)
    bad = write(tmp_path / "bad.csv", "repo,size\na,1\nb,big\n")
    with pytest.raises(DataError, match=r"bad.csv:3"):
        ingest_dependency_csv(edges, bad)


def test_ingest_empty_files_no_nodes(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "repo,size\n")
    edges = write(tmp_path / "edges.csv", "source_repo,target_repo\n")
    with pytest.raises(DataError, match="no nodes"):
        ingest_dependency_csv(edges, nodes)


def test_ingest_missing_file_names_path(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "repo\na\n")
    with pytest.raises(DataError, match="nope.csv"):
        ingest_dependency_csv(tmp_path / "nope.csv", nodes)


def test_ingest_filters(tmp_path):
    nodes = write(tmp_path / "nodes.csv", "repo,size,stars\na,0,5\nb,2,60000\nc,3,10\nd,4,\n")
    edges = write(tmp_path / "edges.csv", "source_repo,target_repo\na,b\nc,d\nc,a\n")
    g, cov = ingest_dependency_csv(edges, nodes,
                                   filters={"size": (1e-9, None), "stars": (None, 50000)})
    assert g.node_ids == ["c"]
    assert g.edge_count == 0
    assert cov.raw_values.shape == (1, 2)
    with pytest.raises(DataError, match="unknown covariate"):
        ingest_dependency_csv(edges, nodes, filters={"forks": (0, 1)})


# components

def test_largest_weak_component_two_components():
    g = DependencyGraph.from_edges(["a", "b", "c"], [0], [1])
    cov = random_covariates(np.random.default_rng(0), 3, 1)
    sub, sub_cov = largest_weak_component(g, cov)
    assert sub.node_ids == ["a", "b"]
    assert sub.edge_count == 1
    assert np.array_equal(sub_cov.codes, cov.codes[:2])


def test_largest_weak_component_tie_goes_to_smallest_index():
    g = DependencyGraph.from_edges(["a", "b", "c", "d"], [2, 0], [3, 1])
    sub, _ = largest_weak_component(g)
    assert sub.node_ids == ["a", "b"]


def test_largest_weak_component_identity_and_idempotent(rng):
    g = random_graph(rng, 30, 0.2)
    sub, _ = largest_weak_component(g)
    assert sub.node_ids == g.node_ids
    assert np.array_equal(sub.out_indices, g.out_indices)
    h = random_graph(rng, 40, 0.03)
    once, _ = largest_weak_component(h)
    twice, _ = largest_weak_component(once)
    assert once.node_ids == twice.node_ids
    assert np.array_equal(once.out_indices, twice.out_indices)


def test_largest_weak_component_matches_networkx(rng):
    for _ in range(10):
        g = random_graph(rng, 40, 0.02)
        sub, _ = largest_weak_component(g)
        G = nx.DiGraph()
        G.add_nodes_from(range(g.node_count))
        G.add_edges_from(zip(*g.edge_arrays()))
        best = max(nx.weakly_connected_components(G), key=lambda c: (len(c), -min(c)))
        assert sub.node_ids == [g.node_ids[i] for i in sorted(best)]


def test_largest_weak_component_empty_graph():
    with pytest.raises(DataError):
        largest_weak_component(DependencyGraph.from_edges([], [], []))


# quartiles

def test_discretize_constant():
    assert discretize_quartiles([5, 5, 5, 5]).tolist() == [0, 0, 0, 0]


def test_discretize_eight_values():
    assert discretize_quartiles([1, 2, 3, 4, 5, 6, 7, 8], 4).tolist() == [0, 0, 1, 1, 2, 2, 3, 3]


def rank_oracle(values, q):
    s = sorted(values)
    n = len(s)
    cuts = []
    for k in range(1, q):
        # nearest rank: smallest rank r with r/n >= k/q
        r = next(r for r in range(1, n + 1) if r * q >= k * n)
        cuts.append(s[r - 1])
    return [sum(c < v for c in cuts) for v in values]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=1, max_size=40), st.integers(2, 6))
def test_discretize_matches_rank_oracle(values, q):
    codes = discretize_quartiles(values, q)
    assert codes.tolist() == rank_oracle(values, q)
    assert codes.min() >= 0 and codes.max() < q
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(codes[order]) >= 0)


def test_discretize_errors():
    with pytest.raises(ValueError):
        discretize_quartiles([1.0, np.nan])
    with pytest.raises(ValueError):
        discretize_quartiles([1.0, 2.0], q=1)


# degree stats

def test_degree_stats_chain():
    s = degree_stats(chain())
    assert s.out_degree["mean"] == pytest.approx(2 / 3)
    assert s.in_degree["mean"] == pytest.approx(2 / 3)
    assert s.out_degree["max"] == 1 and s.in_degree["min"] == 0


def test_degree_stats_empty_graph():
    g = DependencyGraph.from_edges(["a", "b", "c"], [], [])
    s = degree_stats(g)
    for d in (s.in_degree, s.out_degree, s.eigenvector):
        assert all(v == 0 for v in d.values())


def test_degree_stats_properties(rng):
    g = random_graph(rng, 50, 0.1)
    s = degree_stats(g)
    assert g.in_degree().sum() == g.out_degree().sum() == g.edge_count
    assert s.in_degree["mean"] == pytest.approx(s.out_degree["mean"])
    for d in (s.in_degree, s.out_degree, s.eigenvector):
        assert d["min"] <= d["p5"] <= d["median"] <= d["p95"] <= d["max"]
    deg = np.sort(g.in_degree())
    assert s.in_degree["std"] == pytest.approx(np.std(deg, ddof=1))
    assert s.in_degree["median"] == deg[int(np.ceil(0.5 * deg.size)) - 1]


def test_nearest_rank_and_summarize():
    s = np.arange(1, 101, dtype=float)
    assert nearest_rank(s, "0.05") == 5
    assert nearest_rank(s, "0.95") == 95
    assert nearest_rank(s, "0.99") == 99
    assert summarize([7.0])["std"] == 0.0


# eigenvector centrality

def test_eigenvector_star():
    n = 6
    g = DependencyGraph.from_edges([f"v{i}" for i in range(n)], range(1, n), [0] * (n - 1))
    res = eigenvector_centrality(g)
    assert res.scores[0] == 1.0
    leaves = res.scores[1:]
    assert np.allclose(leaves, leaves[0]) and leaves[0] < 1


def test_eigenvector_matches_dense_solver(rng):
    checked = 0
    while checked < 10:
        g = random_graph(rng, 8, 0.4)
        G = nx.DiGraph(list(zip(*g.edge_arrays())))
        if G.number_of_nodes() < 8 or not nx.is_strongly_connected(G):
            continue
        at = g.dense().T.astype(float)
        w, v = np.linalg.eig(at)
        top = np.real(v[:, np.argmax(np.real(w))])
        top = np.abs(top) / np.abs(top).max()
        res = eigenvector_centrality(g, tol=1e-12, max_iter=10000)
        assert res.converged
        assert np.allclose(res.scores, top, atol=1e-6)
        checked += 1


def test_eigenvector_edgeless_and_nonconvergence():
    g = DependencyGraph.from_edges(["a", "b"], [], [])
    res = eigenvector_centrality(g)
    assert res.converged and np.all(res.scores == 0)
    res = eigenvector_centrality(chain(), tol=1e-15, max_iter=3)
    assert not res.converged
    assert res.scores.max() == 1.0


# communities

def modularity(adj_sym, labels):
    m = adj_sym.sum() / 2
    k = adj_sym.sum(axis=1)
    same = labels[:, None] == labels[None, :]
    return float(((adj_sym - np.outer(k, k) / (2 * m)) * same).sum() / (2 * m))


def test_communities_two_cliques_best_two_partition():
    n = 8
    adj = np.zeros((n, n), dtype=int)
    for block in (range(4), range(4, 8)):
        for i, j in itertools.permutations(block, 2):
            if i < j:
                adj[i, j] = 1
    adj[3, 4] = 1
    g = DependencyGraph.from_adjacency(adj)
    labels = detect_communities(g, seed=0)
    assert labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    sym = ((adj + adj.T) > 0).astype(float)
    best = max(
        (np.array([0] + list(bits)) for bits in itertools.product((0, 1), repeat=n - 1)),
        key=lambda lab: modularity(sym, lab),
    )
    assert modularity(sym, labels) == pytest.approx(modularity(sym, best))


def test_communities_trivial_cases():
    g = DependencyGraph.from_edges(["a", "b", "c"], [], [])
    assert detect_communities(g).tolist() == [0, 1, 2]
    clique = DependencyGraph.from_adjacency(np.ones((5, 5)) - np.eye(5))
    assert detect_communities(clique).tolist() == [0] * 5


def test_communities_deterministic(rng):
    g = random_graph(rng, 60, 0.05)
    assert np.array_equal(detect_communities(g, seed=3), detect_communities(g, seed=3))


# artifacts

def test_save_load_roundtrip(tmp_path, rng):
    g = random_graph(rng, 20, 0.2)
    cov = random_covariates(rng, 20, 2)
    save_graph(tmp_path / "g.npz", g, cov)
    g2, cov2 = load_graph(tmp_path / "g.npz")
    assert g2.node_ids == g.node_ids
    assert np.array_equal(g2.out_indices, g.out_indices)
    assert np.array_equal(cov2.codes, cov.codes)
    assert cov2.covariate_names == cov.covariate_names


def test_labels_csv_roundtrip(tmp_path):
    g = chain()
    write_labels_csv(tmp_path / "l.csv", g, [1, 0, 1])
    assert read_labels_csv(tmp_path / "l.csv", g).tolist() == [1, 0, 1]
    write(tmp_path / "bad.csv", "repo,label\na,0\n")
    with pytest.raises(DataError, match="no label"):
        read_labels_csv(tmp_path / "bad.csv", g)


def test_graph_stats_counts():
    g = DependencyGraph.from_edges(["a", "b", "c", "d"], [0, 1], [1, 0])
    s = graph_stats(g)
    assert (s["nodes"], s["edges"], s["components"], s["lcc_nodes"], s["lcc_edges"]) == (4, 2, 3, 2, 2)


def test_invariants_random(rng):
    for _ in range(20):
        g = random_graph(rng, 25, 0.15)
        g.check_invariants()
        assert g.in_degree().sum() == g.out_degree().sum() == g.edge_count
