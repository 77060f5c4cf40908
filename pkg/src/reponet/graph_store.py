"""
Repository dependency graphs: ingestion, storage, descriptive statistics.

An edge ``i -> j`` (``g[i, j] == 1``) means repository ``i`` depends on
repository ``j``. Both the out-edge and the in-edge adjacency are kept in
compressed sparse row form so that dependency and dependent lookups are
equally cheap.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DataError

log = logging.getLogger(__name__)

QUANTILE_LEVELS = {"p5": "0.05", "median": "0.5", "p95": "0.95"}


def nearest_rank(sorted_values, level) -> float:
    """Nearest-rank quantile of an ascending array (``level`` in [0, 1])."""
    n = len(sorted_values)
    if n == 0:
        return 0.0
    rank = math.ceil(Fraction(str(level)) * n)
    return sorted_values[max(rank - 1, 0)]


@dataclass
class DependencyGraph:
    """Directed graph over repositories in dual CSR form.

    ``out_indptr/out_indices`` list the dependencies of each node,
    ``in_indptr/in_indices`` its dependents. Neighbour lists are sorted and
    duplicate free; self-loops never occur.
    """

    node_ids: list
    out_indptr: np.ndarray
    out_indices: np.ndarray
    in_indptr: np.ndarray
    in_indices: np.ndarray
    _index: dict = field(default=None, repr=False, compare=False)

    @classmethod
    def from_edges(cls, node_ids, sources, targets) -> "DependencyGraph":
        """Build from parallel source/target index arrays.

        Duplicate pairs are collapsed and self-loops dropped.
        """
        n = len(node_ids)
        src = np.asarray(sources, dtype=np.int64)
        dst = np.asarray(targets, dtype=np.int64)
        if src.shape != dst.shape:
            raise ValueError("sources and targets differ in length")
        if src.size and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n):
            raise ValueError("edge endpoint out of range")
        keep = src != dst
        src, dst = src[keep], dst[keep]
        key = np.unique(src * n + dst) if src.size else np.zeros(0, dtype=np.int64)
        src, dst = key // max(n, 1), key % max(n, 1)
        out_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=out_indptr[1:])
        order = np.lexsort((src, dst))
        in_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n), out=in_indptr[1:])
        return cls(
            node_ids=list(node_ids),
            out_indptr=out_indptr,
            out_indices=dst.astype(np.int64),
            in_indptr=in_indptr,
            in_indices=src[order].astype(np.int64),
        )

    @classmethod
    def from_adjacency(cls, adj, node_ids=None) -> "DependencyGraph":
        coo = sp.coo_matrix(adj)
        mask = coo.data != 0
        n = coo.shape[0]
        if node_ids is None:
            node_ids = [str(i) for i in range(n)]
        return cls.from_edges(node_ids, coo.row[mask], coo.col[mask])

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return int(self.out_indices.size)

    def out_edges(self, i: int) -> np.ndarray:
        return self.out_indices[self.out_indptr[i]:self.out_indptr[i + 1]]

    def in_edges(self, i: int) -> np.ndarray:
        return self.in_indices[self.in_indptr[i]:self.in_indptr[i + 1]]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.out_indptr)

    def in_degree(self) -> np.ndarray:
        return np.diff(self.in_indptr)

    def has_edge(self, i: int, j: int) -> bool:
        row = self.out_edges(i)
        pos = np.searchsorted(row, j)
        return bool(pos < row.size and row[pos] == j)

    def edge_arrays(self):
        """Return ``(sources, targets)`` in row-major order."""
        src = np.repeat(np.arange(self.node_count, dtype=np.int64), self.out_degree())
        return src, self.out_indices.copy()

    def adjacency(self, dtype=np.float64) -> sp.csr_matrix:
        n = self.node_count
        data = np.ones(self.edge_count, dtype=dtype)
        return sp.csr_matrix((data, self.out_indices, self.out_indptr), shape=(n, n))

    def dense(self) -> np.ndarray:
        return self.adjacency(dtype=np.int64).toarray()

    def index_of(self, name) -> int:
        if self._index is None:
            self._index = {nid: i for i, nid in enumerate(self.node_ids)}
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown node {name!r}") from None

    def subgraph(self, nodes) -> "DependencyGraph":
        """Induced subgraph on ``nodes`` (kept in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.node_count, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        src, dst = self.edge_arrays()
        keep = (remap[src] >= 0) & (remap[dst] >= 0)
        return DependencyGraph.from_edges(
            [self.node_ids[i] for i in nodes], remap[src[keep]], remap[dst[keep]]
        )

    def check_invariants(self) -> None:
        """Full scan of the structural invariants; raises AssertionError."""
        n = self.node_count
        assert self.out_indptr[-1] == self.in_indptr[-1] == self.edge_count
        fwd = set()
        for i in range(n):
            row = self.out_edges(i)
            assert np.all(np.diff(row) > 0), f"row {i} not strictly sorted"
            assert i not in row, f"self-loop at {i}"
            fwd.update((i, int(j)) for j in row)
        back = set()
        for j in range(n):
            col = self.in_edges(j)
            assert np.all(np.diff(col) > 0), f"column {j} not strictly sorted"
            back.update((int(i), j) for i in col)
        assert fwd == back, "out/in adjacency disagree"


@dataclass
class CovariateTable:
    """Categorical node covariates (quartile codes) plus raw values.

    Missing raw values get their own extra category, so a column with
    missing entries has ``q + 1`` categories.
    """

    covariate_names: list
    codes: np.ndarray
    raw_values: np.ndarray | None = None
    num_categories: list | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.codes), -1)
        if self.codes.shape[1] != len(self.covariate_names):
            raise ValueError("codes width does not match covariate_names")
        if self.num_categories is None:
            self.num_categories = [
                int(self.codes[:, p].max()) + 1 if self.codes.shape[0] else 1
                for p in range(self.codes.shape[1])
            ]

    @classmethod
    def empty(cls, n: int) -> "CovariateTable":
        return cls([], np.zeros((n, 0), dtype=np.int64), np.zeros((n, 0)), [])

    @property
    def num_covariates(self) -> int:
        return len(self.covariate_names)

    def __len__(self):
        return self.codes.shape[0]

    def matches(self, i: int, j: int) -> np.ndarray:
        """Pairwise homophily indicators 1{x_ip == x_jp}."""
        return (self.codes[i] == self.codes[j]).astype(np.int64)

    def take(self, rows) -> "CovariateTable":
        rows = np.asarray(rows, dtype=np.int64)
        raw = None if self.raw_values is None else self.raw_values[rows]
        return CovariateTable(list(self.covariate_names), self.codes[rows], raw,
                              list(self.num_categories))

    def select(self, names: Sequence[str]) -> "CovariateTable":
        idx = [self.covariate_names.index(nm) for nm in names]
        raw = None if self.raw_values is None else self.raw_values[:, idx]
        return CovariateTable(list(names), self.codes[:, idx], raw,
                              [self.num_categories[i] for i in idx])

    def check_invariants(self, n: int | None = None) -> None:
        if n is not None:
            assert self.codes.shape[0] == n
        for p, ncat in enumerate(self.num_categories):
            col = self.codes[:, p]
            assert col.size == 0 or (col.min() >= 0 and col.max() < ncat)


def discretize_quartiles(values, q: int = 4) -> np.ndarray:
    """Map reals to ``q`` ordered categories.

    Cut points sit at the nearest-rank quantiles ``k/q`` (k = 1..q-1) of the
    sorted values; a value's code is the number of cut points strictly below
    it, so ties always share a code.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot discretize an empty vector")
    if q < 2:
        raise ValueError("q must be at least 2")
    if np.isnan(v).any():
        raise ValueError("NaN in values")
    s = np.sort(v)
    n = s.size
    cuts = np.array([s[max(-(-k * n // q) - 1, 0)] for k in range(1, q)])
    return np.searchsorted(cuts, v, side="left").astype(np.int64)


def _read_rows(path: Path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = []
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            rows.append((reader.line_num, row))
    return header, rows


def _check_name(name: str, path, line: int) -> str:
    name = name.strip()
    if not name or "," in name:
        raise DataError(f"{path}:{line}: invalid repository name {name!r}")
    return name


def ingest_dependency_csv(
    edges_path,
    nodes_path,
    q: int = 4,
    filters: Mapping[str, tuple] | None = None,
):
    """Read edge and node CSV dumps into a graph and a covariate table.

    ``filters`` maps a covariate name to an inclusive ``(low, high)`` range
    (either end may be None). Nodes outside any range are dropped together
    with their edges; nodes with a missing value in a filtered column are
    dropped as well.
    """
    edges_path, nodes_path = Path(edges_path), Path(nodes_path)
    n_header, n_rows = _read_rows(nodes_path)
    e_header, e_rows = _read_rows(edges_path)

    cov_names = []
    if n_header is not None:
        if not n_header or n_header[0].strip() != "repo":
            raise DataError(f"{nodes_path}:1: expected header starting with 'repo'")
        cov_names = [h.strip() for h in n_header[1:]]
    if e_header is not None and [h.strip() for h in e_header] != ["source_repo", "target_repo"]:
        raise DataError(f"{edges_path}:1: expected header 'source_repo,target_repo'")

    index: dict[str, int] = {}
    names: list[str] = []
    raw: list[list[float]] = []
    for line, row in n_rows:
        if len(row) != len(cov_names) + 1:
            raise DataError(f"{nodes_path}:{line}: expected {len(cov_names) + 1} fields, got {len(row)}")
        name = _check_name(row[0], nodes_path, line)
        vals = []
        for field_ in row[1:]:
            field_ = field_.strip()
            if field_ == "":
                vals.append(np.nan)
                continue
            try:
                vals.append(float(field_))
            except ValueError:
                raise DataError(f"{nodes_path}:{line}: non-numeric covariate {field_!r}") from None
        if name in index:
            raise DataError(f"{nodes_path}:{line}: duplicate repository {name!r}")
        index[name] = len(names)
        names.append(name)
        raw.append(vals)

    src, dst = [], []
    unknown = []
    for line, row in e_rows:
        if len(row) != 2:
            raise DataError(f"{edges_path}:{line}: expected 2 fields, got {len(row)}")
        a = _check_name(row[0], edges_path, line)
        b = _check_name(row[1], edges_path, line)
        for nm in (a, b):
            if nm not in index:
                index[nm] = len(names)
                names.append(nm)
                raw.append([np.nan] * len(cov_names))
                unknown.append(nm)
        src.append(index[a])
        dst.append(index[b])

    if not names:
        raise DataError("no nodes")
    if unknown:
        log.warning("%d repositories appear only in %s; covariates marked missing (first: %s)",
                    len(unknown), edges_path, unknown[0])

    raw_arr = np.array(raw, dtype=np.float64).reshape(len(names), len(cov_names))
    graph = DependencyGraph.from_edges(names, src, dst)

    if filters:
        keep = np.ones(len(names), dtype=bool)
        for col, (lo, hi) in filters.items():
            if col not in cov_names:
                raise DataError(f"filter on unknown covariate {col!r}")
            v = raw_arr[:, cov_names.index(col)]
            ok = ~np.isnan(v)
            if lo is not None:
                ok &= v >= lo
            if hi is not None:
                ok &= v <= hi
            keep &= ok
        rows = np.flatnonzero(keep)
        if rows.size == 0:
            raise DataError("no nodes")
        graph = graph.subgraph(rows)
        raw_arr = raw_arr[rows]

    cov = covariates_from_raw(cov_names, raw_arr, q=q)
    return graph, cov


def covariates_from_raw(names, raw, q: int = 4) -> CovariateTable:
    raw = np.asarray(raw, dtype=np.float64).reshape(len(raw), len(names))
    codes = np.zeros(raw.shape, dtype=np.int64)
    ncat = []
    for p in range(raw.shape[1]):
        col = raw[:, p]
        missing = np.isnan(col)
        if (~missing).any():
            codes[~missing, p] = discretize_quartiles(col[~missing], q)
        codes[missing, p] = q
        ncat.append(q + 1 if missing.any() else q)
    return CovariateTable(list(names), codes, raw, ncat)


def weak_components(g: DependencyGraph):
    """Return ``(count, labels)`` of weakly connected components."""
    if g.node_count == 0:
        return 0, np.zeros(0, dtype=np.int64)
    return connected_components(g.adjacency(), directed=True, connection="weak")


def largest_weak_component(g: DependencyGraph, cov: CovariateTable | None = None):
    """Restrict to the largest weak component (ties: smallest member index).

    Node order within the component follows the original order.
    """
    if g.node_count == 0:
        raise DataError("empty graph")
    ncomp, labels = weak_components(g)
    sizes = np.bincount(labels, minlength=ncomp)
    first = np.full(ncomp, g.node_count, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(g.node_count))
    best = min(range(ncomp), key=lambda c: (-sizes[c], first[c]))
    nodes = np.flatnonzero(labels == best)
    sub = g.subgraph(nodes)
    return sub, (cov.take(nodes) if cov is not None else None)


@dataclass
class DegreeSummary:
    """Distribution summaries keyed by statistic name.

    Each entry holds mean, std, min, p5, median, p95 and max.
    """

    in_degree: dict
    out_degree: dict
    eigenvector: dict

    def to_dict(self) -> dict:
        return {"in_degree": self.in_degree, "out_degree": self.out_degree,
                "eigenvector_centrality": self.eigenvector}


def summarize(values, levels=None) -> dict:
    """Mean, sample SD and nearest-rank quantiles of ``values``."""
    v = np.asarray(values, dtype=np.float64)
    levels = levels or QUANTILE_LEVELS
    if v.size == 0:
        out = {"mean": 0.0, "std": 0.0, "min": 0.0, "max": 0.0}
        out.update({k: 0.0 for k in levels})
        return out
    s = np.sort(v)
    out = {
        "mean": float(math.fsum(s) / s.size),
        "std": float(np.std(s, ddof=1)) if s.size > 1 else 0.0,
        "min": float(s[0]),
    }
    for name, level in levels.items():
        out[name] = float(nearest_rank(s, level))
    out["max"] = float(s[-1])
    return out


def degree_stats(g: DependencyGraph, centrality=None) -> DegreeSummary:
    if centrality is None:
        centrality = eigenvector_centrality(g).scores
    return DegreeSummary(
        in_degree=summarize(g.in_degree()),
        out_degree=summarize(g.out_degree()),
        eigenvector=summarize(centrality),
    )


@dataclass
class CentralityResult:
    scores: np.ndarray
    converged: bool
    iterations: int


def eigenvector_centrality(g: DependencyGraph, tol: float = 1e-6,
                           max_iter: int = 1000) -> CentralityResult:
    """In-link eigenvector centrality scaled so the top score is 1.

    Power iteration on ``I + A^T`` from a uniform start. The identity shift
    leaves the dominant eigenvector unchanged but keeps the iteration from
    collapsing to zero on acyclic graphs, which dependency graphs mostly are.
    """
    n = g.node_count
    if n == 0:
        raise DataError("empty graph")
    if g.edge_count == 0:
        return CentralityResult(np.zeros(n), True, 0)
    at = g.adjacency().T.tocsr()
    x = np.full(n, 1.0 / n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y = x + at @ x
        y /= np.linalg.norm(y)
        delta = np.abs(y - x).sum()
        x = y
        if delta < tol:
            converged = True
            break
    top = x.max()
    scores = x / top if top > 0 else x
    return CentralityResult(scores, converged, it)


def detect_communities(g: DependencyGraph, seed: int = 0, resolution: float = 1.0) -> np.ndarray:
    """Louvain modularity communities on the symmetrized graph.

    Labels are renumbered so that community 0 holds node 0 and so on in
    order of each community's smallest member.
    """
    import networkx as nx

    n = g.node_count
    und = nx.Graph()
    und.add_nodes_from(range(n))
    src, dst = g.edge_arrays()
    und.add_edges_from(zip(src.tolist(), dst.tolist()))
    if g.edge_count == 0:
        return np.arange(n, dtype=np.int64)
    comms = nx.community.louvain_communities(und, seed=seed, resolution=resolution)
    comms = sorted((sorted(c) for c in comms), key=lambda c: c[0])
    labels = np.empty(n, dtype=np.int64)
    for lab, members in enumerate(comms):
        labels[members] = lab
    return labels


def read_labels_csv(path, graph: DependencyGraph) -> np.ndarray:
    """Read a ``repo,label`` file; every graph node must be labelled."""
    header, rows = _read_rows(Path(path))
    if header is None or [h.strip() for h in header] != ["repo", "label"]:
        raise DataError(f"{path}:1: expected header 'repo,label'")
    labels = np.full(graph.node_count, -1, dtype=np.int64)
    for line, row in rows:
        if len(row) != 2:
            raise DataError(f"{path}:{line}: expected 2 fields, got {len(row)}")
        name = row[0].strip()
        try:
            lab = int(row[1])
        except ValueError:
            raise DataError(f"{path}:{line}: label is not an integer") from None
        if lab < 0:
            raise DataError(f"{path}:{line}: negative label")
        try:
            labels[graph.index_of(name)] = lab
        except KeyError:
            log.warning("%s:%d: label for unknown repository %r ignored", path, line, name)
    if (labels < 0).any():
        missing = graph.node_ids[int(np.flatnonzero(labels < 0)[0])]
        raise DataError(f"{path}: no label for repository {missing!r}")
    return labels


def write_labels_csv(path, graph: DependencyGraph, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repo", "label"])
        for name, lab in zip(graph.node_ids, labels):
            w.writerow([name, int(lab)])


def write_edges_csv(path, graph: DependencyGraph) -> None:
    src, dst = graph.edge_arrays()
    ids = graph.node_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_repo", "target_repo"])
        for a, b in zip(src.tolist(), dst.tolist()):
            w.writerow([ids[a], ids[b]])


def write_nodes_csv(path, graph: DependencyGraph, cov: CovariateTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repo", *cov.covariate_names])
        raw = cov.raw_values if cov.raw_values is not None else cov.codes.astype(float)
        for i, name in enumerate(graph.node_ids):
            w.writerow([name, *("" if np.isnan(v) else repr(float(v)) for v in raw[i])])


def save_graph(path, graph: DependencyGraph, cov: CovariateTable) -> None:
    """Write the canonical binary artifact (uncompressed ``.npz``)."""
    raw = cov.raw_values if cov.raw_values is not None else np.full(cov.codes.shape, np.nan)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            node_ids=np.array(graph.node_ids, dtype=str),
            out_indptr=graph.out_indptr,
            out_indices=graph.out_indices,
            covariate_names=np.array(cov.covariate_names, dtype=str),
            codes=cov.codes,
            raw_values=raw,
            num_categories=np.array(cov.num_categories, dtype=np.int64),
        )


def load_graph(path):
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    node_ids = data["node_ids"].tolist()
    indptr = data["out_indptr"]
    src = np.repeat(np.arange(len(node_ids), dtype=np.int64), np.diff(indptr))
    graph = DependencyGraph.from_edges(node_ids, src, data["out_indices"])
    cov = CovariateTable(data["covariate_names"].tolist(),
                         data["codes"].reshape(len(node_ids), -1),
                         data["raw_values"].reshape(len(node_ids), -1),
                         data["num_categories"].tolist())
    return graph, cov


def graph_stats(g: DependencyGraph, lcc_graph: DependencyGraph | None = None) -> dict:
    """Counts plus degree summary, as written to ``stats.json``."""
    ncomp, _ = weak_components(g)
    if lcc_graph is None:
        lcc_graph, _ = largest_weak_component(g)
    cent = eigenvector_centrality(lcc_graph)
    summary = degree_stats(lcc_graph, cent.scores)
    return {
        "nodes": g.node_count,
        "edges": g.edge_count,
        "components": int(ncomp),
        "lcc_nodes": lcc_graph.node_count,
        "lcc_edges": lcc_graph.edge_count,
        "eigenvector_converged": cent.converged,
        **summary.to_dict(),
    }
