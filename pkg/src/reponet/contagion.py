"""
Vulnerability contagion on dependency graphs.

A vulnerability in repository ``s`` spreads to every repository that
depends on ``s``, directly or transitively, so reachability runs along
in-edges (dependents). ``Syst.k`` of a seed counts the repositories within
``k`` such steps, the seed included. Protected repositories neither become
vulnerable nor pass vulnerabilities on.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import brandes_partial, reach_counts_multi
from .graph_store import DependencyGraph, summarize

log = logging.getLogger(__name__)

SYST_LEVELS = {"median": "0.5", "p5": "0.05", "p95": "0.95", "p99": "0.99"}
STRATEGIES = ("expected-systemicness", "in-degree", "explicit-list")
_CHUNK = 64


def _protected_mask(g: DependencyGraph, protected) -> np.ndarray:
    mask = np.zeros(g.node_count, dtype=np.bool_)
    if protected is not None:
        idx = np.asarray(list(protected), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= g.node_count):
            raise KeyError("protected node out of range")
        mask[idx] = True
    return mask


def _chunks(n: int):
    return [np.arange(s, min(s + _CHUNK, n), dtype=np.int64) for s in range(0, n, _CHUNK)]


def _map_chunks(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def systemicness(g: DependencyGraph, k_list, protected=None, seeds=None,
                 protected_seed_value: int = 0, workers: int = 1) -> np.ndarray:
    """Syst.k for each seed (rows) and each k in ``k_list`` (columns)."""
    ks = np.asarray(sorted(set(int(k) for k in k_list)), dtype=np.int64)
    if ks.size == 0 or ks[0] < 1:
        raise ValueError("k must be at least 1")
    mask = _protected_mask(g, protected)
    seeds = np.arange(g.node_count, dtype=np.int64) if seeds is None else np.asarray(seeds, dtype=np.int64)

    def run(idx):
        out = np.zeros((idx.size, ks.size), dtype=np.int64)
        reach_counts_multi(g.in_indptr, g.in_indices, seeds[idx], ks, mask,
                           protected_seed_value, out)
        return out

    parts = _map_chunks(run, _chunks(seeds.size), workers)
    res = np.concatenate(parts, axis=0) if parts else np.zeros((0, ks.size), dtype=np.int64)
    order = [int(np.searchsorted(ks, int(k))) for k in k_list]
    return res[:, order]


def k_step_systemicness(g: DependencyGraph, seed, k: int, protected=None,
                        protected_seed_value: int = 0) -> int:
    """Number of repositories made vulnerable within ``k`` steps of ``seed``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if isinstance(seed, str):
        seed = g.index_of(seed)
    if not 0 <= int(seed) < g.node_count:
        raise KeyError(f"unknown node {seed!r}")
    return int(systemicness(g, [k], protected, [int(seed)], protected_seed_value)[0, 0])


def systemicness_distribution(g: DependencyGraph, k_list, protected=None, workers: int = 1,
                              values=None) -> dict:
    """Summary of Syst.k across all seeds for each k."""
    if values is None:
        values = systemicness(g, k_list, protected, workers=workers)
    return {int(k): summarize(values[:, c], SYST_LEVELS) for c, k in enumerate(k_list)}


def expected_fatality(g: DependencyGraph, i=None) -> np.ndarray | float:
    """Sum over dependents j of 1/(number of dependents of j).

    Dependents without dependents of their own contribute nothing.
    Returns the full vector when ``i`` is None.
    """
    indeg = g.in_degree().astype(np.float64)
    contrib = np.divide(1.0, indeg, out=np.zeros_like(indeg), where=indeg > 0)
    if i is not None:
        return float(sum(contrib[j] for j in g.in_edges(int(i))))
    src, dst = g.edge_arrays()
    ef = np.zeros(g.node_count)
    np.add.at(ef, dst, contrib[src])
    return ef


def raw_betweenness(g: DependencyGraph, workers: int = 1) -> np.ndarray:
    """Unnormalized directed shortest-path betweenness (Brandes)."""
    n = g.node_count

    def run(idx):
        out = np.zeros(n)
        brandes_partial(g.out_indptr, g.out_indices, idx, out)
        return out

    parts = _map_chunks(run, _chunks(n), workers)
    total = np.zeros(n)
    for part in parts:
        total += part
    return total


def _max_normalize(v) -> np.ndarray:
    top = float(np.max(v)) if len(v) else 0.0
    return np.asarray(v, dtype=np.float64) / top if top > 0 else np.zeros(len(v))


def betweenness(g: DependencyGraph, workers: int = 1) -> np.ndarray:
    """Betweenness divided by its maximum."""
    return _max_normalize(raw_betweenness(g, workers))


@dataclass
class Ranking:
    order: np.ndarray
    score: np.ndarray
    betweenness: np.ndarray
    fatality: np.ndarray


def expected_systemicness_ranking(g: DependencyGraph, workers: int = 1) -> Ranking:
    """Nodes by descending ``(betweenness_norm + fatality_norm) / 2``.

    Ties go to the larger in-degree, then the smaller node index.
    """
    b = betweenness(g, workers)
    ef = _max_normalize(expected_fatality(g))
    score = 0.5 * b + 0.5 * ef
    n = g.node_count
    order = np.lexsort((np.arange(n), -g.in_degree(), -score))
    return Ranking(order, score, b, ef)


@dataclass
class ProtectionSpec:
    strategy: str
    count: int
    protected_nodes: list = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.count < 0:
            raise ValueError("protected count must be non-negative")


def resolve_protection(g: DependencyGraph, spec: ProtectionSpec,
                       ranking: Ranking | None = None) -> np.ndarray:
    """Concrete protected node indices for a strategy (``min(l, N)`` of them)."""
    n = g.node_count
    count = min(spec.count, n)
    if spec.strategy == "expected-systemicness":
        if ranking is None:
            ranking = expected_systemicness_ranking(g)
        return np.sort(ranking.order[:count])
    if spec.strategy == "in-degree":
        order = np.lexsort((np.arange(n), -g.in_degree()))
        return np.sort(order[:count])
    nodes = []
    for item in spec.protected_nodes:
        idx = g.index_of(item) if isinstance(item, str) else int(item)
        if not 0 <= idx < n:
            raise KeyError(f"unknown node {item!r}")
        nodes.append(idx)
    nodes = list(dict.fromkeys(nodes))[:count] if spec.count else list(dict.fromkeys(nodes))
    return np.sort(np.asarray(nodes, dtype=np.int64))


@dataclass
class ContagionReport:
    node_ids: list
    k_list: list
    syst: np.ndarray
    expected_fatality: np.ndarray
    betweenness: np.ndarray
    expected_systemicness: np.ndarray
    distribution: dict
    protection_curves: list = field(default_factory=list)
    protected_sets: dict = field(default_factory=dict)

    def curve(self, strategy: str, count: int, k: int) -> dict:
        for row in self.protection_curves:
            if row["strategy"] == strategy and row["l"] == count and row["k"] == k:
                return row
        raise KeyError((strategy, count, k))

    def to_dict(self) -> dict:
        return {
            "nodes": len(self.node_ids),
            "k_list": list(self.k_list),
            "distribution": {f"syst_{k}": v for k, v in self.distribution.items()},
            "protection_curves": self.protection_curves,
            "protected_sets": {key: [self.node_ids[i] for i in v]
                               for key, v in self.protected_sets.items()},
        }

    def write(self, out_dir, prefix: str = "contagion") -> dict:
        from pathlib import Path

        out = Path(out_dir)
        paths = {
            "json": out / f"{prefix}_summary.json",
            "nodes": out / f"{prefix}_nodes.csv",
            "curves": out / f"{prefix}_protection.csv",
        }
        with open(paths["json"], "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        with open(paths["nodes"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repo", *(f"syst_{k}" for k in self.k_list), "ef", "betweenness",
                        "expected_systemicness"])
            for i, name in enumerate(self.node_ids):
                w.writerow([name, *(int(v) for v in self.syst[i]),
                            repr(float(self.expected_fatality[i])),
                            repr(float(self.betweenness[i])),
                            repr(float(self.expected_systemicness[i]))])
        with open(paths["curves"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", "l", "k", "avg_systemicness", "avg_excluding_protected"])
            for row in self.protection_curves:
                w.writerow([row["strategy"], row["l"], row["k"], repr(row["avg_systemicness"]),
                            repr(row["avg_excluding_protected"])])
        return paths


def _curve_rows(strategy, count, k_list, values, mask):
    rows = []
    n = values.shape[0]
    free = ~mask
    for c, k in enumerate(k_list):
        col = values[:, c]
        rows.append({
            "strategy": strategy,
            "l": int(count),
            "k": int(k),
            "avg_systemicness": float(col.sum() / n) if n else 0.0,
            "avg_excluding_protected": float(col[free].sum() / free.sum()) if free.any() else 0.0,
        })
    return rows


def protection_experiment(g: DependencyGraph, specs, k_list, workers: int = 1,
                          protected_seed_value: int = 0, include_baseline: bool = True) -> ContagionReport:
    """Average Syst.k with and without protected sets.

    For each spec the average is reported over all N seeds (protected seeds
    score ``protected_seed_value``) and over unprotected seeds only.
    """
    k_list = [int(k) for k in k_list]
    ranking = expected_systemicness_ranking(g, workers)
    base = systemicness(g, k_list, workers=workers)
    report = ContagionReport(
        node_ids=list(g.node_ids),
        k_list=k_list,
        syst=base,
        expected_fatality=expected_fatality(g),
        betweenness=ranking.betweenness,
        expected_systemicness=ranking.score,
        distribution=systemicness_distribution(g, k_list, values=base),
    )
    if include_baseline:
        report.protection_curves += _curve_rows("none", 0, k_list, base,
                                                np.zeros(g.node_count, dtype=bool))
    for spec in specs:
        nodes = resolve_protection(g, spec, ranking)
        mask = _protected_mask(g, nodes)
        vals = systemicness(g, k_list, nodes, protected_seed_value=protected_seed_value,
                            workers=workers)
        report.protection_curves += _curve_rows(spec.strategy, spec.count, k_list, vals, mask)
        report.protected_sets[f"{spec.strategy}:{spec.count}"] = nodes.tolist()
    return report


def contagion_report(g: DependencyGraph, k_list, workers: int = 1) -> ContagionReport:
    return protection_experiment(g, [], k_list, workers, include_baseline=False)
