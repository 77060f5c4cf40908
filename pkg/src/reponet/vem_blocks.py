"""
Variational EM with MM updates for a directed blockmodel with covariates.

Link probabilities ``pi[x, k, l]`` depend on the sender type ``k``, the
receiver type ``l`` and the pair's covariate cell ``x``: the bit pattern of
homophily indicators ``1{x_ip == x_jp}``. The type posterior update
maximizes a separable quadratic minorizer of the variational lower bound,
one small simplex QP per node.

The quadratic coefficients need, for every node and type, a sum over all
other nodes. That sum is computed for the empty network with all pairs in
the baseline cell first (column totals only), then corrected with
per-profile aggregates for non-baseline covariate cells and with a pass
over the existing edges. Cost per iteration is O((N + |E|) K^2 + C^2 K)
where C is the number of distinct covariate profiles.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericalError
from .graph_store import CovariateTable, DependencyGraph

log = logging.getLogger(__name__)

XI_FLOOR = 1e-6
PSEUDO_COUNT = 0.5
INIT_OFF_MASS = 1e-3


class CellIndex:
    """Covariate-cell bookkeeping for one graph.

    ``cell = sum_p 1{x_ip == x_jp} << p``; cell 0 is the baseline (no
    matches), the last cell is "all match" (which is also where a node
    would pair with itself).
    """

    def __init__(self, g: DependencyGraph, cov: CovariateTable | None):
        n = g.node_count
        codes = np.zeros((n, 0), dtype=np.int64) if cov is None else cov.codes
        self.names = [] if cov is None else list(cov.covariate_names)
        self.num_covariates = codes.shape[1]
        self.num_cells = 1 << self.num_covariates
        self.full_cell = self.num_cells - 1
        profiles, self.profile = np.unique(codes, axis=0, return_inverse=True)
        self.profile = self.profile.reshape(-1)
        c = profiles.shape[0]
        self.num_profiles = c
        weights = 1 << np.arange(self.num_covariates)
        self.profile_cells = (
            (profiles[:, None, :] == profiles[None, :, :]) @ weights
        ).astype(np.int64).reshape(c, c)
        self.member = sp.csr_matrix(
            (np.ones(n), (self.profile, np.arange(n))), shape=(c, n)
        )
        src, dst = g.edge_arrays()
        self.src, self.dst = src, dst
        edge_cells = self.profile_cells[self.profile[src], self.profile[dst]] if src.size else src
        self.edge_cells = edge_cells
        self.edge_mats = {}
        for x in np.unique(edge_cells):
            sel = edge_cells == x
            self.edge_mats[int(x)] = sp.csr_matrix(
                (np.ones(int(sel.sum())), (src[sel], dst[sel])), shape=(n, n)
            )
        self.cell_masks = [(self.profile_cells == x).astype(np.float64)
                           for x in range(self.num_cells)]
        self.n = n

    def cell_of(self, i: int, j: int) -> int:
        return int(self.profile_cells[self.profile[i], self.profile[j]])

    def pair_cells(self) -> np.ndarray:
        """Dense N x N cell matrix (small graphs / oracles only)."""
        return self.profile_cells[self.profile[:, None], self.profile[None, :]]

    def cell_bits(self, x: int) -> tuple:
        return tuple((x >> p) & 1 for p in range(self.num_covariates))


@dataclass
class VariationalState:
    xi: np.ndarray
    eta: np.ndarray
    pi1: np.ndarray
    empty_cells: np.ndarray
    lower_bound_trace: list = field(default_factory=list)
    phase_starts: list = field(default_factory=lambda: [0])
    iterations: int = 0
    converged: bool = False
    covariate_names: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.xi.shape[1]

    def log_pi(self):
        """``(log pi(d=0), log pi(d=1))``, each shaped (cells, K, K)."""
        if np.any(self.pi1 <= 0.0) or np.any(self.pi1 >= 1.0):
            raise NumericalError("link probability of exactly 0 or 1")
        return np.log1p(-self.pi1), np.log(self.pi1)

    def pi_table(self) -> dict:
        """``{(k, l, d, x_bits): probability}`` for every cell."""
        out = {}
        ncov = len(self.covariate_names)
        for x in range(self.pi1.shape[0]):
            bits = tuple((x >> p) & 1 for p in range(ncov))
            for k in range(self.K):
                for l in range(self.K):
                    p1 = float(self.pi1[x, k, l])
                    out[(k, l, 1, bits)] = p1
                    out[(k, l, 0, bits)] = 1.0 - p1
        return out

    def to_json(self, path) -> None:
        n, k = self.xi.shape
        doc = {
            "format": "reponet-vem-checkpoint/1",
            "xi_layout": "row-major, N rows of K type probabilities",
            "N": n,
            "K": k,
            "covariate_names": list(self.covariate_names),
            "xi": [float(v) for v in self.xi.ravel()],
            "eta": [float(v) for v in self.eta],
            "pi_table": [
                {"k": kk, "l": ll, "d": d, "x": list(bits), "p": p}
                for (kk, ll, d, bits), p in sorted(self.pi_table().items())
            ],
            "empty_cells": [int(x) for x in np.flatnonzero(self.empty_cells.any(axis=(1, 2)))],
            "lower_bound_trace": [float(v) for v in self.lower_bound_trace],
            "phase_starts": list(self.phase_starts),
            "iterations": self.iterations,
            "converged": self.converged,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "VariationalState":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {path}") from None
        n, k = doc["N"], doc["K"]
        names = doc["covariate_names"]
        ncell = 1 << len(names)
        pi1 = np.full((ncell, k, k), 0.5)
        for e in doc["pi_table"]:
            if e["d"] == 1:
                x = sum(b << p for p, b in enumerate(e["x"]))
                pi1[x, e["k"], e["l"]] = e["p"]
        empty = np.zeros((ncell, k, k), dtype=bool)
        empty[doc.get("empty_cells", [])] = True
        return cls(
            xi=np.array(doc["xi"], dtype=np.float64).reshape(n, k),
            eta=np.array(doc["eta"], dtype=np.float64),
            pi1=pi1,
            empty_cells=empty,
            lower_bound_trace=list(doc["lower_bound_trace"]),
            phase_starts=list(doc.get("phase_starts", [0])),
            iterations=doc["iterations"],
            converged=doc["converged"],
            covariate_names=names,
        )


@dataclass
class QuadraticTerms:
    A: np.ndarray
    B: np.ndarray


def soften_labels(labels, K: int, off_mass: float = INIT_OFF_MASS) -> np.ndarray:
    """Hard labels to an interior responsibility matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError("initial label out of range")
    if K == 1:
        return np.ones((labels.size, 1))
    xi = np.full((labels.size, K), off_mass)
    xi[np.arange(labels.size), labels] = 1.0 - (K - 1) * off_mass
    return xi


def update_eta(xi) -> np.ndarray:
    eta = np.asarray(xi).mean(axis=0)
    return eta / eta.sum()


def _pair_weight_totals(cells: CellIndex, xi):
    """Sum over ordered pairs i != j in each cell of xi_i^T xi_j, (cells, K, K)."""
    S = cells.member @ xi
    den = np.empty((cells.num_cells, xi.shape[1], xi.shape[1]))
    for x in range(cells.num_cells):
        den[x] = S.T @ cells.cell_masks[x] @ S
    den[cells.full_cell] -= xi.T @ xi
    return den


def _edge_weight_totals(cells: CellIndex, xi):
    num = np.zeros((cells.num_cells, xi.shape[1], xi.shape[1]))
    for x, mat in cells.edge_mats.items():
        num[x] = xi.T @ (mat @ xi)
    return num


def update_pi(cells: CellIndex, xi, pseudo_count: float = PSEUDO_COUNT):
    """Smoothed weighted link frequencies per (cell, k, l).

    Returns ``(pi1, empty)`` where ``empty`` flags cells with no pair mass;
    those fall back to the smoothed prior 1/2.
    """
    den = np.maximum(_pair_weight_totals(cells, xi), 0.0)
    num = np.minimum(_edge_weight_totals(cells, xi), den)
    empty = den <= 0.0
    pi1 = (num + pseudo_count) / (den + 2.0 * pseudo_count)
    return pi1, empty


def smoothing_log_prior(pi1, pseudo_count: float = PSEUDO_COUNT) -> float:
    """Log-prior term whose maximizer turns raw frequencies into smoothed ones."""
    return float(pseudo_count * np.sum(np.log(pi1) + np.log1p(-pi1)))


def compute_omega(cells: CellIndex, xi, log_pi0, log_pi1) -> np.ndarray:
    """Expected pairwise log-probability sums, (N, K)."""
    base = log_pi0[0]
    sym0 = base + base.T
    tau = xi.sum(axis=0)
    omega = (tau[None, :] - xi) @ sym0

    if cells.num_cells > 1:
        S = cells.member @ xi
        T = np.zeros_like(S)
        for x in range(1, cells.num_cells):
            m = log_pi0[x] - base
            T += cells.cell_masks[x] @ S @ (m + m.T)
        omega += T[cells.profile]
        m_full = log_pi0[cells.full_cell] - base
        omega -= xi @ (m_full + m_full.T)

    diff = log_pi1 - log_pi0
    for x, mat in cells.edge_mats.items():
        d = diff[x]
        omega += mat @ (xi @ d.T)
        omega += mat.T @ (xi @ d)
    return omega


def _entropy_term(xi, eta) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = xi * (np.log(eta)[None, :] - np.log(xi))
    return float(np.sum(np.where(xi > 0, t, 0.0)))


def lower_bound(cells: CellIndex, state: VariationalState, omega=None) -> float:
    """Variational lower bound (unsmoothed)."""
    log_pi0, log_pi1 = state.log_pi()
    if omega is None:
        omega = compute_omega(cells, state.xi, log_pi0, log_pi1)
    return 0.5 * float(np.sum(state.xi * omega)) + _entropy_term(state.xi, state.eta)


def compute_quadratic_terms(cells: CellIndex, state: VariationalState, omega=None,
                            floor: float = XI_FLOOR) -> QuadraticTerms:
    xi = state.xi
    if np.any(xi < floor * (1.0 - 1e-9)):
        raise NumericalError(f"responsibility below floor {floor}")
    if omega is None:
        omega = compute_omega(cells, xi, *state.log_pi())
    A = omega / (2.0 * xi) - 1.0 / xi
    with np.errstate(divide="ignore"):
        B = np.log(state.eta)[None, :] - np.log(xi) + 1.0
    return QuadraticTerms(A, B)


def minorizer_value(terms: QuadraticTerms, xi) -> float:
    return float(np.sum(terms.A * xi * xi + terms.B * xi))


def solve_simplex_qp(A, B, lower: float = 0.0, iters: int = 200) -> np.ndarray:
    """Maximize ``sum_k A_k x_k^2 + B_k x_k`` over ``{lower <= x <= 1, sum x = 1}``.

    Works row-wise on (N, K) arrays or on single K-vectors. The KKT point is
    ``x_k = clip((lam - B_k) / (2 A_k), lower, 1)``; ``lam`` is bracketed by
    bisection and then solved in closed form on the free coordinates.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    single = A.ndim == 1
    A2 = np.atleast_2d(A)
    B2 = np.atleast_2d(B)
    K = A2.shape[1]
    if not np.all(A2 < 0):
        raise NumericalError("non-concave subproblem")
    if lower * K > 1.0:
        raise ValueError("lower bound infeasible")
    if K == 1:
        out = np.ones_like(A2)
        return out[0] if single else out

    two_a = 2.0 * A2

    def project(lam):
        return np.clip((lam[:, None] - B2) / two_a, lower, 1.0)

    lo = np.min(B2 + two_a, axis=1) - 1.0
    hi = np.max(B2 + two_a * lower, axis=1) + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        over = project(mid).sum(axis=1) > 1.0
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(1.0, np.abs(lo))):
            break
    lam = 0.5 * (lo + hi)
    x = project(lam)
    free = (x > lower) & (x < 1.0)
    fixed_sum = np.where(free, 0.0, x).sum(axis=1)
    inv = np.where(free, 1.0 / two_a, 0.0).sum(axis=1)
    shift = np.where(free, B2 / two_a, 0.0).sum(axis=1)
    ok = inv != 0.0
    lam_exact = np.where(ok, (1.0 - fixed_sum + shift) / np.where(ok, inv, 1.0), lam)
    x_exact = project(lam_exact)
    good = np.abs(x_exact.sum(axis=1) - 1.0) <= np.abs(x.sum(axis=1) - 1.0)
    x = np.where(good[:, None], x_exact, x)
    return x[0] if single else x


def solve_node_simplex_qp(A_row, B_row, lower: float = 0.0) -> np.ndarray:
    return solve_simplex_qp(np.asarray(A_row), np.asarray(B_row), lower)


def harden_types(xi) -> np.ndarray:
    """Modal type per node; ties go to the smallest type index."""
    return np.argmax(np.asarray(xi), axis=1).astype(np.int64)


def fit_labels_to_k(g: DependencyGraph, labels, K: int) -> np.ndarray:
    """Coerce an arbitrary partition to exactly ``K`` labels.

    Extra communities beyond the ``K`` largest are dissolved: each of their
    nodes joins the kept community it has most links to (largest kept
    community if none). Missing communities are produced by halving the
    largest one in node order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if K > n:
        raise DataError(f"K={K} exceeds the number of nodes {n}")
    uniq, inv = np.unique(labels, return_inverse=True)
    sizes = np.bincount(inv)
    order = sorted(range(uniq.size), key=lambda c: (-sizes[c], c))
    kept = order[:K]
    remap = np.full(uniq.size, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    out = remap[inv]
    if (out < 0).any():
        adj = g.adjacency()
        sym = (adj + adj.T).tocsr()
        for i in np.flatnonzero(out < 0):
            nbrs = sym.indices[sym.indptr[i]:sym.indptr[i + 1]]
            nbr_labels = out[nbrs]
            nbr_labels = nbr_labels[nbr_labels >= 0]
            if nbr_labels.size:
                out[i] = int(np.argmax(np.bincount(nbr_labels, minlength=len(kept))))
            else:
                out[i] = 0
    nlab = len(kept)
    while nlab < K:
        counts = np.bincount(out, minlength=nlab)
        big = int(np.argmax(counts))
        members = np.flatnonzero(out == big)
        out[members[members.size // 2:]] = nlab
        nlab += 1
    return out


def _m_step(cells, xi):
    eta = update_eta(xi)
    pi1, empty = update_pi(cells, xi)
    return eta, pi1, empty


def run_vem(g: DependencyGraph, cov: CovariateTable | None, K: int, init_labels,
            max_iter: int = 300, tol: float = 1e-7, warm_iterations: int = 0,
            floor: float = XI_FLOOR, resume: VariationalState | None = None,
            callback=None) -> VariationalState:
    """Fit type responsibilities by variational EM with MM updates.

    The recorded bound includes the smoothing log-prior, which is the
    quantity that the smoothed closed-form M-step and the MM step both
    increase. ``warm_iterations`` initial iterations ignore covariates.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    n = g.node_count
    full_cells = CellIndex(g, cov if cov is not None and cov.num_covariates else None)
    warm_cells = CellIndex(g, None) if warm_iterations > 0 and full_cells.num_covariates else None

    if resume is not None:
        if resume.xi.shape != (n, K):
            raise DataError("checkpoint shape does not match graph and K")
        xi = np.maximum(resume.xi, floor)
        xi /= xi.sum(axis=1, keepdims=True)
        trace = list(resume.lower_bound_trace)
        phase_starts = list(resume.phase_starts)
        done = resume.iterations
    else:
        init = np.asarray(init_labels, dtype=np.int64)
        if init.size != n:
            raise DataError("init_labels length does not match the graph")
        xi = soften_labels(init, K)
        trace, phase_starts, done = [], [], 0

    def cells_for(it):
        return warm_cells if warm_cells is not None and it < warm_iterations else full_cells

    cells = cells_for(done)
    eta, pi1, empty = _m_step(cells, xi)
    state = VariationalState(xi, eta, pi1, empty, trace, phase_starts, done, False,
                             list(cells.names))
    omega = compute_omega(cells, xi, *state.log_pi())
    if resume is None or not trace:
        state.phase_starts.append(len(trace))
        trace.append(lower_bound(cells, state, omega) + smoothing_log_prior(pi1))

    for it in range(done, max_iter):
        new_cells = cells_for(it)
        if new_cells is not cells:
            cells = new_cells
            state.eta, state.pi1, state.empty_cells = _m_step(cells, state.xi)
            state.covariate_names = list(cells.names)
            omega = compute_omega(cells, state.xi, *state.log_pi())
            state.phase_starts.append(len(trace))
            trace.append(lower_bound(cells, state, omega) + smoothing_log_prior(state.pi1))
        try:
            terms = compute_quadratic_terms(cells, state, omega, floor)
            xi = solve_simplex_qp(terms.A, terms.B, lower=floor)
        except NumericalError as exc:
            raise NumericalError(f"iteration {it + 1}: {exc}") from None
        state.xi = xi
        state.eta, state.pi1, state.empty_cells = _m_step(cells, xi)
        omega = compute_omega(cells, xi, *state.log_pi())
        value = lower_bound(cells, state, omega) + smoothing_log_prior(state.pi1)
        prev = trace[-1]
        trace.append(value)
        state.iterations = it + 1
        if callback is not None:
            callback(state)
        in_warm = warm_cells is not None and it + 1 < warm_iterations
        if not in_warm and abs(value - prev) <= tol * abs(prev):
            state.converged = True
            break
    log.info("VEM stopped after %d iterations (converged=%s)", state.iterations, state.converged)
    return state


def hard_label_agreement(truth, estimate) -> float:
    """Best agreement over label permutations (Hungarian matching)."""
    from scipy.optimize import linear_sum_assignment

    truth = np.asarray(truth)
    estimate = np.asarray(estimate)
    kt, ke = truth.max() + 1, estimate.max() + 1
    conf = np.zeros((kt, ke))
    np.add.at(conf, (truth, estimate), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / truth.size)
