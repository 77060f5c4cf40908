"""
Maximum pseudolikelihood for the structural payoff parameters.

Conditional on hard types, each ordered pair contributes a logit whose
linear predictor is the change statistic of the formation model. Within a
type the regressors are an intercept, the homophily indicators and the
externality count; between types only the intercept and the indicators
enter. The two strata share no parameters and are fitted separately.

The design only takes a handful of distinct values per stratum, so rows are
streamed in blocks of source nodes and collapsed into a weighted table of
unique regressor vectors. Newton iterations on that table are exact.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError, NumericalError
from .formation_model import StructuralParams, TypeAssignment
from .graph_store import CovariateTable, DependencyGraph

log = logging.getLogger(__name__)

WITHIN, BETWEEN = "within", "between"


@dataclass
class DyadDesignRow:
    i: int
    j: int
    response: int
    stratum: str
    features: np.ndarray


@dataclass
class DesignBlock:
    """Design rows for a block of source nodes, both strata mixed."""

    i: np.ndarray
    j: np.ndarray
    response: np.ndarray
    within: np.ndarray
    matches: np.ndarray
    externality: np.ndarray

    def features(self, stratum: str) -> np.ndarray:
        sel = self.within if stratum == WITHIN else ~self.within
        cols = [np.ones(int(sel.sum())), *self.matches[sel].T]
        if stratum == WITHIN:
            cols.append(self.externality[sel])
        return np.column_stack(cols).astype(np.float64)

    def responses(self, stratum: str) -> np.ndarray:
        sel = self.within if stratum == WITHIN else ~self.within
        return self.response[sel]


def same_type_degrees(g: DependencyGraph, labels):
    src, dst = g.edge_arrays()
    same = labels[src] == labels[dst]
    n = g.node_count
    sd_out = np.bincount(src[same], minlength=n)
    sd_in = np.bincount(dst[same], minlength=n)
    return sd_out, sd_in


def iter_design_blocks(g: DependencyGraph, cov: CovariateTable, types: TypeAssignment,
                       block_size: int = 256):
    """Yield :class:`DesignBlock` objects covering every ordered pair i != j.

    The externality count of ``(i, j)`` is ``sd_out[j] + sd_in[i] - 2 g_ji``
    within a type: the same-type dependencies of ``j`` and dependents of
    ``i``, with the pair itself removed.
    """
    labels = types.labels
    n = g.node_count
    if labels.size != n:
        raise DataError("types length does not match the graph")
    codes = cov.codes
    sd_out, sd_in = same_type_degrees(g, labels)
    adj = g.adjacency(dtype=np.int8)
    adj_t = adj.T.tocsr()
    cols = np.arange(n)
    for start in range(0, n, block_size):
        rows = np.arange(start, min(start + block_size, n))
        out_rows = adj[rows].toarray()
        in_rows = adj_t[rows].toarray()
        keep = rows[:, None] != cols[None, :]
        ii = np.broadcast_to(rows[:, None], keep.shape)[keep]
        jj = np.broadcast_to(cols[None, :], keep.shape)[keep]
        resp = out_rows[keep].astype(np.int64)
        back = in_rows[keep].astype(np.int64)
        within = labels[ii] == labels[jj]
        matches = (codes[ii] == codes[jj]).astype(np.int64)
        ext = np.where(within, sd_out[jj] + sd_in[ii] - 2 * back, 0)
        yield DesignBlock(ii, jj, resp, within, matches, ext)


def build_design_rows(g: DependencyGraph, cov: CovariateTable, types: TypeAssignment):
    """Stream one :class:`DyadDesignRow` per ordered pair."""
    for block in iter_design_blocks(g, cov, types):
        for t in range(block.i.size):
            within = bool(block.within[t])
            feats = [1, *block.matches[t]]
            if within:
                feats.append(block.externality[t])
            yield DyadDesignRow(int(block.i[t]), int(block.j[t]), int(block.response[t]),
                                WITHIN if within else BETWEEN, np.array(feats, dtype=np.float64))


@dataclass
class AggregatedDesign:
    """Unique regressor rows with binomial counts."""

    X: np.ndarray
    successes: np.ndarray
    trials: np.ndarray
    offset: np.ndarray | None = None

    @property
    def n_obs(self) -> float:
        return float(self.trials.sum())


def aggregate_blocks(blocks, stratum: str, zero_fraction: float | None = None,
                     rng: np.random.Generator | None = None) -> AggregatedDesign | None:
    """Collapse streamed rows of one stratum into an :class:`AggregatedDesign`.

    With ``zero_fraction`` set, non-links are kept with that probability and
    an offset ``-log(zero_fraction)`` corrects the intercept (case-control
    sampling; approximate).
    """
    table: dict[tuple, list] = {}
    for block in blocks:
        X = block.features(stratum)
        if X.shape[0] == 0:
            continue
        y = block.responses(stratum)
        if zero_fraction is not None:
            keep = (y == 1) | (rng.random(y.size) < zero_fraction)
            X, y = X[keep], y[keep]
        uniq, inv = np.unique(X, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        succ = np.bincount(inv, weights=y, minlength=uniq.shape[0])
        tot = np.bincount(inv, minlength=uniq.shape[0])
        for r in range(uniq.shape[0]):
            key = tuple(uniq[r])
            cell = table.setdefault(key, [0.0, 0.0])
            cell[0] += succ[r]
            cell[1] += tot[r]
    if not table:
        return None
    keys = sorted(table)
    X = np.array(keys, dtype=np.float64)
    succ = np.array([table[k][0] for k in keys])
    tot = np.array([table[k][1] for k in keys])
    offset = None
    if zero_fraction is not None:
        offset = np.full(len(keys), -np.log(zero_fraction))
    return AggregatedDesign(X, succ, tot, offset)


@dataclass
class LogitFit:
    coef: np.ndarray
    std_errors: np.ndarray
    z_values: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    gradient_norm: float
    hessian: np.ndarray
    message: str = ""


def _loglik(design: AggregatedDesign, beta) -> float:
    eta = design.X @ beta
    if design.offset is not None:
        eta = eta + design.offset
    return float(np.sum(design.successes * eta - design.trials * np.logaddexp(0.0, eta)))


def fit_logit(design: AggregatedDesign, max_iter: int = 100, grad_tol: float = 1e-8,
              coef_limit: float = 30.0) -> LogitFit:
    """Binomial logit by damped Newton-Raphson.

    Convergence is declared when the gradient max-norm drops below
    ``grad_tol``. Diverging coefficients (complete or quasi-complete
    separation) end the fit with ``converged=False``.
    """
    succ, trials = design.successes, design.trials
    if succ.sum() <= 0 or succ.sum() >= trials.sum():
        raise DataError("all responses identical; logit not identified")
    X = design.X
    p = X.shape[1]
    beta = np.zeros(p)
    rate = succ.sum() / trials.sum()
    beta[0] = np.log(rate / (1 - rate)) - (0.0 if design.offset is None else design.offset[0])
    ll = _loglik(design, beta)
    converged = False
    message = ""
    grad = np.zeros(p)
    hess = -np.eye(p)
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        if design.offset is not None:
            eta = eta + design.offset
        mu = expit(eta)
        grad = X.T @ (succ - trials * mu)
        w = trials * mu * (1 - mu)
        hess = -(X.T * w) @ X
        if np.max(np.abs(grad)) < grad_tol:
            converged = True
            break
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            cll = _loglik(design, cand)
            if cll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, cll
        if np.max(np.abs(beta)) > coef_limit:
            message = "coefficients diverging; likely separation"
            break
    else:
        message = "maximum iterations reached"
    if converged:
        try:
            cov = np.linalg.inv(-hess)
        except np.linalg.LinAlgError:
            cov = np.full((p, p), np.nan)
            converged = False
            message = "singular information matrix"
    else:
        cov = np.full((p, p), np.nan)
    se = np.sqrt(np.diag(cov)) if converged else np.full(p, np.nan)
    if converged and not np.all(se > 0):
        converged = False
        message = "non-positive variance estimate"
    return LogitFit(beta, se, beta / se, ll, it, converged, float(np.max(np.abs(grad))), hess,
                    message)


@dataclass
class FitResult:
    estimates: StructuralParams
    std_errors: dict
    z_values: dict
    log_pseudolikelihood: float
    iteration_count: int
    converged: bool
    within: LogitFit | None = None
    between: LogitFit | None = None
    errors: dict = field(default_factory=dict)

    def parameter_rows(self):
        """``(block, name, estimate, std_error, z)`` in report order."""
        rows = []
        names = self.estimates.covariate_names or [f"x{p}" for p in range(self.estimates.num_covariates)]
        blocks = [(WITHIN, self.within, ["edges", *names, "externality"]),
                  (BETWEEN, self.between, ["edges", *names])]
        for label, fit, pnames in blocks:
            if fit is None:
                continue
            for k, nm in enumerate(pnames):
                rows.append((label, nm, float(fit.coef[k]), float(fit.std_errors[k]),
                             float(fit.z_values[k])))
        return rows

    def to_dict(self) -> dict:
        doc = {"converged": self.converged,
               "log_pseudolikelihood": self.log_pseudolikelihood,
               "iterations": self.iteration_count,
               "parameters": self.estimates.to_dict()}
        for label, fit in ((WITHIN, self.within), (BETWEEN, self.between)):
            if fit is None:
                doc[label] = {"absent": True, "reason": self.errors.get(label, "empty stratum")}
                continue
            doc[label] = {
                "converged": fit.converged,
                "message": fit.message,
                "log_likelihood": fit.log_likelihood,
                "coefficients": {nm: {"estimate": est, "std_error": se, "z": z}
                                 for lab, nm, est, se, z in self.parameter_rows() if lab == label},
            }
        return doc

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_finite(self.to_dict()), fh, indent=2)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block", "parameter", "estimate", "std_error", "z"])
            for row in self.parameter_rows():
                w.writerow([row[0], row[1], *(repr(v) for v in row[2:])])


def _finite(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def fit_structural(g: DependencyGraph, cov: CovariateTable, types: TypeAssignment,
                   zero_fraction: float | None = None, seed: int = 0,
                   block_size: int = 256) -> FitResult:
    """Fit within- and between-type payoff parameters by pseudolikelihood.

    A stratum that cannot be fitted (empty, or no variation in links) is
    reported as absent with the reason; the other stratum is still fitted.
    """
    P = cov.num_covariates
    fits: dict[str, LogitFit | None] = {}
    errors = {}
    for stratum in (WITHIN, BETWEEN):
        rng = np.random.default_rng(seed) if zero_fraction is not None else None
        design = aggregate_blocks(iter_design_blocks(g, cov, types, block_size), stratum,
                                  zero_fraction, rng)
        if design is None:
            fits[stratum] = None
            errors[stratum] = "empty stratum"
            continue
        try:
            fits[stratum] = fit_logit(design)
        except DataError as exc:
            fits[stratum] = None
            errors[stratum] = str(exc)
            log.warning("%s stratum not fitted: %s", stratum, exc)

    fw, fb = fits[WITHIN], fits[BETWEEN]
    if fw is None and fb is None:
        raise NumericalError("neither stratum could be fitted: " + "; ".join(
            f"{k}: {v}" for k, v in errors.items()))
    nan = np.full(P, np.nan)
    params = StructuralParams(
        alpha_w=float(fw.coef[0]) if fw else np.nan,
        alpha_b=float(fb.coef[0]) if fb else np.nan,
        beta_w=fw.coef[1:1 + P] if fw else nan,
        beta_b=fb.coef[1:1 + P] if fb else nan,
        gamma=float(fw.coef[-1]) if fw else np.nan,
        covariate_names=list(cov.covariate_names),
    )
    se, z = {}, {}
    for label, fit in ((WITHIN, fw), (BETWEEN, fb)):
        if fit is not None:
            se[label] = fit.std_errors
            z[label] = fit.z_values
    parts = [f for f in (fw, fb) if f is not None]
    return FitResult(
        estimates=params,
        std_errors=se,
        z_values=z,
        log_pseudolikelihood=float(sum(f.log_likelihood for f in parts)),
        iteration_count=max(f.iterations for f in parts),
        converged=all(f.converged for f in parts),
        within=fw,
        between=fb,
        errors=errors,
    )


def log_pseudolikelihood(g: DependencyGraph, cov: CovariateTable, types: TypeAssignment,
                         params: StructuralParams) -> float:
    """Pseudolikelihood of ``params`` summed over all ordered pairs."""
    total = 0.0
    for block in iter_design_blocks(g, cov, types):
        for stratum in (WITHIN, BETWEEN):
            X = block.features(stratum)
            if X.shape[0] == 0:
                continue
            if stratum == WITHIN:
                beta = np.concatenate([[params.alpha_w], params.beta_w, [params.gamma]])
            else:
                beta = np.concatenate([[params.alpha_b], params.beta_b])
            eta = X @ beta
            y = block.responses(stratum)
            total += float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return total
