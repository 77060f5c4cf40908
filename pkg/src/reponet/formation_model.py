"""
Strategic network formation with within-type link externalities.

Links between repositories of different latent types are independent
logits. Links within a type form an exponential random graph whose
potential adds ``gamma`` for every directed two-path ``i -> j -> r``.
The sequential best-response dynamics with logistic shocks has that
potential as its stationary log-weight.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from ._kernels import glauber_record, glauber_steps
from .errors import ConfigError
from .graph_store import CovariateTable, DependencyGraph

MAX_ENUM_DYADS = 20
_BATCH = 1 << 18


@dataclass
class StructuralParams:
    """Payoff parameters; ``w`` entries apply within a type, ``b`` between."""

    alpha_w: float
    alpha_b: float
    beta_w: np.ndarray
    beta_b: np.ndarray
    gamma: float
    eta: np.ndarray | None = None
    covariate_names: list = field(default_factory=list)

    def __post_init__(self):
        self.beta_w = np.atleast_1d(np.asarray(self.beta_w, dtype=np.float64))
        self.beta_b = np.atleast_1d(np.asarray(self.beta_b, dtype=np.float64))
        if self.beta_w.shape != self.beta_b.shape:
            raise ValueError("beta_w and beta_b must have the same length")
        if self.eta is not None:
            self.eta = np.asarray(self.eta, dtype=np.float64)
            if (self.eta < 0).any() or abs(self.eta.sum() - 1.0) > 1e-12:
                raise ValueError("eta must be a probability vector")
        if self.covariate_names and len(self.covariate_names) != self.beta_w.size:
            raise ValueError("covariate_names length does not match beta")

    @property
    def num_covariates(self) -> int:
        return self.beta_w.size

    def to_dict(self) -> dict:
        out = {
            "alpha_w": float(self.alpha_w),
            "alpha_b": float(self.alpha_b),
            "beta_w": [float(v) for v in self.beta_w],
            "beta_b": [float(v) for v in self.beta_b],
            "gamma": float(self.gamma),
            "covariate_names": list(self.covariate_names),
        }
        if self.eta is not None:
            out["eta"] = [float(v) for v in self.eta]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StructuralParams":
        try:
            return cls(
                alpha_w=float(d["alpha_w"]),
                alpha_b=float(d["alpha_b"]),
                beta_w=d.get("beta_w", []),
                beta_b=d.get("beta_b", []),
                gamma=float(d["gamma"]),
                eta=d.get("eta"),
                covariate_names=list(d.get("covariate_names", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid parameter file: {exc}") from None

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "StructuralParams":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"parameter file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


@dataclass
class TypeAssignment:
    labels: np.ndarray
    K: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError("type label out of range")

    @classmethod
    def single(cls, n: int) -> "TypeAssignment":
        return cls(np.zeros(n, dtype=np.int64), 1)


def direct_utility(match_indicators, same_type: bool, p: StructuralParams) -> float:
    m = np.asarray(match_indicators, dtype=np.float64)
    if m.shape != p.beta_w.shape:
        raise ValueError(f"expected {p.beta_w.size} match indicators, got {m.size}")
    if same_type:
        return float(p.alpha_w + m @ p.beta_w)
    return float(p.alpha_b + m @ p.beta_b)


def utility_matrices(cov: CovariateTable, p: StructuralParams):
    """Dense within- and between-type utilities for every ordered pair."""
    codes = cov.codes
    if codes.shape[1] != p.num_covariates:
        raise ValueError("covariate count does not match parameters")
    n = codes.shape[0]
    uw = np.full((n, n), float(p.alpha_w))
    ub = np.full((n, n), float(p.alpha_b))
    for q in range(codes.shape[1]):
        match = codes[:, q][:, None] == codes[:, q][None, :]
        uw += p.beta_w[q] * match
        ub += p.beta_b[q] * match
    return uw, ub


def count_two_paths(g: DependencyGraph) -> int:
    """Directed two-paths ``i -> j -> r`` with i, j, r distinct."""
    indeg = g.in_degree()
    outdeg = g.out_degree()
    adj = g.adjacency()
    mutual = adj.multiply(adj.T).nnz
    return int(indeg @ outdeg) - int(mutual)


def potential(g: DependencyGraph, cov: CovariateTable, p: StructuralParams) -> float:
    """Within-type potential of ``g`` (all nodes assumed to share one type)."""
    src, dst = g.edge_arrays()
    if p.num_covariates:
        matches = (cov.codes[src] == cov.codes[dst]).astype(np.float64)
        direct = float(np.sum(p.alpha_w + matches @ p.beta_w))
    else:
        direct = float(p.alpha_w) * src.size
    return direct + float(p.gamma) * count_two_paths(g)


def block_potentials(g: DependencyGraph, cov: CovariateTable, types: TypeAssignment,
                     p: StructuralParams) -> np.ndarray:
    """Potential of each type's induced subgraph."""
    out = np.zeros(types.K)
    for k in range(types.K):
        nodes = np.flatnonzero(types.labels == k)
        if nodes.size:
            out[k] = potential(g.subgraph(nodes), cov.take(nodes), p)
    return out


def externality_count(g: DependencyGraph, i: int, j: int, labels) -> int:
    """Same-type dependencies of j plus same-type dependents of i, r != i, j."""
    t = labels[i]
    outs = g.out_edges(j)
    ins = g.in_edges(i)
    a = int(np.count_nonzero((labels[outs] == t) & (outs != i)))
    b = int(np.count_nonzero((labels[ins] == t) & (ins != j)))
    return a + b


def change_statistic(g: DependencyGraph, i: int, j: int, cov: CovariateTable,
                     types: TypeAssignment, p: StructuralParams) -> float:
    """Potential gain from switching the link ``i -> j`` on, other links fixed."""
    if i == j:
        raise ValueError("change statistic undefined for i == j")
    labels = types.labels
    m = cov.matches(i, j) if p.num_covariates else np.zeros(0)
    if labels[i] != labels[j]:
        return direct_utility(m, False, p)
    return direct_utility(m, True, p) + float(p.gamma) * externality_count(g, i, j, labels)


def _dyads(n: int):
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def _enumerate_potentials(codes: np.ndarray, p: StructuralParams) -> np.ndarray:
    """Potential of every directed graph on ``len(codes)`` nodes.

    Graph ``m`` has link ``dyads[b]`` iff bit ``b`` of ``m`` is set.
    """
    n = codes.shape[0]
    dyads = _dyads(n)
    if len(dyads) > MAX_ENUM_DYADS:
        raise ValueError("enumeration bound exceeded")
    cov = CovariateTable([f"x{q}" for q in range(codes.shape[1])], codes)
    u = np.array([direct_utility(cov.matches(i, j), True, p) for i, j in dyads])
    m = np.arange(1 << len(dyads), dtype=np.int64)
    bits = ((m[:, None] >> np.arange(len(dyads))) & 1).astype(np.float64)
    q = bits @ u
    if p.gamma != 0.0:
        pos = {d: b for b, d in enumerate(dyads)}
        paths = np.zeros(m.size)
        for i, j, r in itertools.permutations(range(n), 3):
            paths += bits[:, pos[(i, j)]] * bits[:, pos[(j, r)]]
        q += p.gamma * paths
    return q


def exact_log_normalizer(codes, p: StructuralParams) -> float:
    """log of the sum of exp(potential) over all graphs on the given nodes.

    ``codes`` holds the covariate rows of the nodes of one type (n x P).
    """
    codes = np.asarray(codes, dtype=np.int64)
    codes = codes.reshape(codes.shape[0], -1)
    if codes.shape[1] != p.num_covariates:
        raise ValueError("covariate count does not match parameters")
    return float(logsumexp(_enumerate_potentials(codes, p)))


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def exact_stationary_logprob(g: DependencyGraph, cov: CovariateTable, types: TypeAssignment,
                             p: StructuralParams) -> float:
    """Exact log stationary probability of ``g`` given types."""
    labels = types.labels
    total = 0.0
    for k in range(types.K):
        nodes = np.flatnonzero(labels == k)
        if nodes.size < 2:
            continue
        sub_cov = cov.take(nodes)
        total += potential(g.subgraph(nodes), sub_cov, p) - exact_log_normalizer(sub_cov.codes, p)
    _, ub = utility_matrices(cov, p)
    between = labels[:, None] != labels[None, :]
    adj = g.dense().astype(bool)
    total += float(np.sum(ub[between & adj]) - np.sum(_log1pexp(ub[between])))
    return total


def _pair_draws(rng: np.random.Generator, n: int, size: int):
    i = rng.integers(0, n, size=size)
    j = rng.integers(0, n - 1, size=size)
    j += j >= i
    return i, j, rng.random(size)


def _sampler_setup(cov, types, p, start):
    n = len(cov)
    uw, ub = utility_matrices(cov, p)
    same = types.labels[:, None] == types.labels[None, :]
    adj = np.zeros((n, n), dtype=np.int8)
    if start is not None:
        adj[:] = start.dense() != 0
    same_adj = adj * same
    sd_out = same_adj.sum(axis=1).astype(np.int64)
    sd_in = same_adj.sum(axis=0).astype(np.int64)
    return adj, uw, ub, same, sd_out, sd_in


def glauber_sample(cov: CovariateTable, types: TypeAssignment, p: StructuralParams,
                   steps: int, seed: int, start: DependencyGraph | None = None,
                   node_ids=None) -> DependencyGraph:
    """Run ``steps`` link revisions from the empty graph (or ``start``).

    Each step draws an ordered pair uniformly and sets the link with the
    logit probability of its change statistic.
    """
    n = len(cov)
    if n < 2:
        raise ValueError("need at least two nodes")
    adj, uw, ub, same, sd_out, sd_in = _sampler_setup(cov, types, p, start)
    rng = np.random.default_rng(seed)
    remaining = int(steps)
    while remaining > 0:
        size = min(remaining, _BATCH)
        i, j, u = _pair_draws(rng, n, size)
        glauber_steps(adj, uw, ub, same, float(p.gamma), sd_out, sd_in, i, j, u)
        remaining -= size
    if node_ids is None:
        node_ids = start.node_ids if start is not None else [f"n{i}" for i in range(n)]
    return DependencyGraph.from_adjacency(adj, node_ids)


def glauber_trace(cov: CovariateTable, types: TypeAssignment, p: StructuralParams,
                  steps: int, seed: int, burn_in: int = 0, thin: int = 1) -> np.ndarray:
    """Bit-encoded states visited by the chain (small graphs only).

    Bit ``b`` of each code refers to the ``b``-th ordered pair in row-major
    order with the diagonal skipped, matching ``graph_code``.
    """
    n = len(cov)
    if n * (n - 1) > 62:
        raise ValueError("graph too large for bit encoding")
    adj, uw, ub, same, sd_out, sd_in = _sampler_setup(cov, types, p, None)
    pair_bit = np.full((n, n), 0, dtype=np.int64)
    for b, (i, j) in enumerate(_dyads(n)):
        pair_bit[i, j] = b
    rng = np.random.default_rng(seed)
    remaining = int(burn_in)
    while remaining > 0:
        size = min(remaining, _BATCH)
        i, j, u = _pair_draws(rng, n, size)
        glauber_steps(adj, uw, ub, same, float(p.gamma), sd_out, sd_in, i, j, u)
        remaining -= size
    out = np.empty(int(steps) // thin, dtype=np.int64)
    written = 0
    remaining = (int(steps) // thin) * thin
    batch = max(thin, (_BATCH // thin) * thin)
    while remaining > 0:
        size = min(remaining, batch)
        i, j, u = _pair_draws(rng, n, size)
        written += glauber_record(adj, uw, ub, same, float(p.gamma), sd_out, sd_in,
                                  i, j, u, thin, pair_bit, out[written:])
        remaining -= size
    return out[:written]


def graph_code(g: DependencyGraph) -> int:
    """Bit encoding of a small graph, consistent with ``glauber_trace``."""
    n = g.node_count
    code = 0
    for b, (i, j) in enumerate(_dyads(n)):
        if g.has_edge(i, j):
            code |= 1 << b
    return code


def graph_from_code(code: int, n: int, node_ids=None) -> DependencyGraph:
    dyads = _dyads(n)
    pairs = [d for b, d in enumerate(dyads) if (code >> b) & 1]
    src = [a for a, _ in pairs]
    dst = [b for _, b in pairs]
    return DependencyGraph.from_edges(node_ids or [f"n{i}" for i in range(n)], src, dst)


def exact_distribution(cov: CovariateTable, types: TypeAssignment, p: StructuralParams) -> np.ndarray:
    """Stationary probabilities of all graphs, indexed by ``graph_code``.

    Uses the factorization across types, so it is exact without building
    each graph.
    """
    n = len(cov)
    dyads = _dyads(n)
    if len(dyads) > 24:
        raise ValueError("enumeration bound exceeded")
    labels = types.labels
    logp = np.zeros(1 << len(dyads))
    codes = np.arange(1 << len(dyads), dtype=np.int64)
    pos = {d: b for b, d in enumerate(dyads)}
    _, ub = utility_matrices(cov, p)
    for k in range(types.K):
        nodes = np.flatnonzero(labels == k)
        if nodes.size < 2:
            continue
        sub = _dyads(nodes.size)
        qvals = _enumerate_potentials(cov.codes[nodes], p)
        qvals = qvals - logsumexp(qvals)
        sub_code = np.zeros(codes.size, dtype=np.int64)
        for b, (a, c) in enumerate(sub):
            bit = (codes >> pos[(int(nodes[a]), int(nodes[c]))]) & 1
            sub_code |= bit << b
        logp += qvals[sub_code]
    for (i, j), b in pos.items():
        if labels[i] != labels[j]:
            bit = (codes >> b) & 1
            logp += bit * ub[i, j] - _log1pexp(ub[i, j])
    return np.exp(logp)


def dyad_link_probabilities(cov: CovariateTable, types: TypeAssignment, p: StructuralParams) -> np.ndarray:
    """Per-dyad link probabilities when links are independent (gamma = 0)."""
    uw, ub = utility_matrices(cov, p)
    same = types.labels[:, None] == types.labels[None, :]
    prob = expit(np.where(same, uw, ub))
    np.fill_diagonal(prob, 0.0)
    return prob


def draw_types(eta, n: int, seed) -> TypeAssignment:
    eta = np.asarray(eta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return TypeAssignment(rng.choice(eta.size, size=n, p=eta), eta.size)
