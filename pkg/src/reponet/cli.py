"""Command-line front end.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines whose
keys are the long option names with dashes or underscores), ``--seed``,
``--workers`` and ``--out``. Command-line flags override config values.

All randomness derives from ``--seed`` through ``numpy.random.SeedSequence``:
child 0 seeds community detection, child 1 case-control subsampling of
non-links, child 2 type draws in ``simulate`` and child 3 the Glauber chain.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import contagion as ctg
from . import graph_store as gs
from .errors import ConfigError, DataError, NumericalError, ReponetError
from .formation_model import StructuralParams, TypeAssignment, draw_types, glauber_sample
from .mple_fit import fit_structural
from .vem_blocks import VariationalState, fit_labels_to_k, harden_types, run_vem

log = logging.getLogger("reponet")

SEED_COMMUNITIES, SEED_SUBSAMPLE, SEED_TYPES, SEED_CHAIN = range(4)
_NUM_STREAMS = 4
GRAPH_FILE = "graph.npz"


def child_seed(seed: int, stream: int) -> int:
    """Integer seed for stream ``stream`` derived from the top-level seed."""
    child = np.random.SeedSequence(seed).spawn(_NUM_STREAMS)[stream]
    return int(child.generate_state(1, dtype=np.uint32)[0])


def _int_list(text) -> list:
    if isinstance(text, list):
        return text
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _str_list(text) -> list:
    if isinstance(text, list):
        return text
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _filter(text) -> tuple:
    parts = str(text).split(":")
    if len(parts) != 3 or not parts[0]:
        raise argparse.ArgumentTypeError(f"expected NAME:LOW:HIGH, got {text!r}")
    try:
        low = float(parts[1]) if parts[1] else None
        high = float(parts[2]) if parts[2] else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bound in filter {text!r}") from None
    return parts[0], low, high


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    workers: int = 1
    out: str = "out"
    edges: str | None = None
    nodes: str | None = None
    labels: str | None = None
    graph: str | None = None
    lcc: bool = True
    quantiles: int = 4
    filters: list = field(default_factory=list)
    K: int = 2
    max_iter: int = 300
    tol: float = 1e-7
    warm_iterations: int = 0
    resume: str | None = None
    checkpoint_every: int = 10
    zero_fraction: float | None = None
    params: str | None = None
    n: int | None = None
    steps: int | None = None
    burn_in: int = 0
    k_list: list = field(default_factory=lambda: [2, 3, 4, 5])
    strategies: list = field(default_factory=list)
    l_list: list = field(default_factory=lambda: [10, 100])
    protect_list: str | None = None
    protected_seed_value: int = 0

    def validate(self) -> None:
        for name in ("edges", "nodes", "labels", "graph", "resume", "params", "protect_list"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name.replace('_', '-')}: file not found: {path}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if any(k < 1 for k in self.k_list):
            raise ConfigError("k values must be at least 1")
        if not self.k_list:
            raise ConfigError("at least one k is required")
        if any(v < 0 for v in self.l_list):
            raise ConfigError("protected counts must be non-negative")
        for s in self.strategies:
            if s not in ctg.STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(ctg.STRATEGIES)}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.zero_fraction is not None and not 0 < self.zero_fraction <= 1:
            raise ConfigError("zero-fraction must lie in (0, 1]")
        if self.quantiles < 1:
            raise ConfigError("quantiles must be at least 1")
        if self.n is not None and self.n < 2:
            raise ConfigError("n must be at least 2")
        if self.steps is not None and self.steps < 0 or self.burn_in < 0:
            raise ConfigError("steps and burn-in must be non-negative")

    def record(self) -> dict:
        """Settings that determine the outputs (worker count and paths excluded)."""
        doc = asdict(self)
        for key in ("workers", "out"):
            doc.pop(key)
        for key in ("edges", "nodes", "labels", "graph", "resume", "params", "protect_list"):
            if doc[key] is not None:
                doc[key] = Path(doc[key]).name
        doc["filters"] = [list(f) for f in doc["filters"]]
        return doc


# argument plumbing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override its values")
    p.add_argument("--seed", type=int, default=0, help="top-level random seed")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="parallel workers (outputs do not depend on this)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _graph_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", help=f"graph artifact from ingest (default OUT/{GRAPH_FILE})")
    p.add_argument("--lcc", action=argparse.BooleanOptionalAction, default=True,
                   help="restrict to the largest weakly connected component")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reponet",
                                     description="Dependency-network formation and contagion analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read edge/node CSV dumps into a graph artifact")
    _common(p)
    p.add_argument("--edges", help="CSV with header source_repo,target_repo")
    p.add_argument("--nodes", help="CSV with header repo,<covariates...>")
    p.add_argument("--quantiles", type=int, default=4, help="categories per covariate")
    p.add_argument("--filter", dest="filters", type=_filter, action="append", default=[],
                   metavar="NAME:LOW:HIGH", help="keep nodes with LOW <= NAME <= HIGH (repeatable)")

    p = sub.add_parser("stats", help="descriptive statistics of a graph artifact")
    _common(p)
    p.add_argument("--graph", help=f"graph artifact (default OUT/{GRAPH_FILE})")

    p = sub.add_parser("fit", help="estimate types (VEM) and payoffs (MPLE)")
    _common(p)
    _graph_input(p)
    p.add_argument("--K", type=int, default=2, help="number of unobserved types")
    p.add_argument("--init", dest="labels", help="initial partition CSV (repo,label)")
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-7, help="relative change stopping rule")
    p.add_argument("--warm-iterations", type=int, default=0,
                   help="initial iterations that ignore covariates")
    p.add_argument("--resume", help="continue from a checkpoint JSON")
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--zero-fraction", type=float, default=None,
                   help="case-control sampling rate for non-links in MPLE")

    p = sub.add_parser("simulate", help="sample a network from the formation model")
    _common(p)
    p.add_argument("--params", help="parameter JSON (alpha_w, alpha_b, beta_w, beta_b, gamma, eta)")
    p.add_argument("--graph", help="take node ids and covariates from this artifact")
    p.add_argument("--n", type=int, default=None, help="number of nodes without covariates")
    p.add_argument("--labels", help="type labels CSV (repo,label); default draws from eta")
    p.add_argument("--steps", type=int, default=None, help="link revisions (default 100 per ordered pair)")
    p.add_argument("--burn-in", type=int, default=0, help="extra revisions run before --steps")

    for name, text in (("contagion", "systemicness, fatality, betweenness report"),
                       ("protect", "protection counterfactual curves")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _graph_input(p)
        p.add_argument("--k", dest="k_list", type=_int_list, default=[2, 3, 4, 5],
                       help="comma-separated depths")
        p.add_argument("--protect", dest="strategies", type=_str_list,
                       default=[] if name == "contagion" else ["expected-systemicness", "in-degree"],
                       help="comma-separated strategies: " + ", ".join(ctg.STRATEGIES))
        p.add_argument("--l", dest="l_list", type=_int_list, default=[10, 100],
                       help="comma-separated protected-set sizes")
        p.add_argument("--protect-list", help="file with one repository per line (explicit-list)")
        p.add_argument("--protected-seed-value", type=int, choices=(0, 1), default=0,
                       help="score assigned to a protected seed")
    return parser


def _config_defaults(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # --K and --k are different options
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_string("[run]\n" + fh.read(), source=str(path))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    actions = {}
    for act in sub._actions:
        for opt in act.option_strings:
            if opt.startswith("--"):
                actions[opt[2:].replace("-", "_")] = act
    out = {}
    for key, raw in cp["run"].items():
        norm = key.replace("-", "_")
        act = actions.get(norm)
        if act is None or norm in ("config", "help"):
            raise ConfigError(f"{path}: unknown key {key!r}")
        try:
            if isinstance(act, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
                value = cp["run"].getboolean(key)
            elif isinstance(act, argparse._AppendAction):
                value = [act.type(v) for v in raw.split(";") if v.strip()]
            elif act.type is not None:
                value = act.type(raw)
            else:
                value = raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from None
        if act.choices is not None and value not in act.choices:
            raise ConfigError(f"{path}: {key!r} must be one of {list(act.choices)}")
        out[act.dest] = value
    return out


def parse_config(argv=None) -> RunConfig:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_config_defaults(parser, sub, args.config))
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fields = RunConfig.__dataclass_fields__
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in fields})
    cfg.validate()
    return cfg


# shared helpers

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_graph(cfg: RunConfig):
    path = Path(cfg.graph) if cfg.graph else Path(cfg.out) / GRAPH_FILE
    if not path.exists():
        raise DataError(f"graph artifact not found: {path} (run 'reponet ingest' first)")
    g, cov = gs.load_graph(path)
    if cfg.lcc:
        g, cov = gs.largest_weak_component(g, cov)
    return g, cov


def _write_stats(g, out: Path) -> dict:
    from .plotting import plot_degree_ccdf

    lcc, _ = gs.largest_weak_component(g)
    stats = gs.graph_stats(g, lcc)
    _write_json(out / "stats.json", stats)
    plot_degree_ccdf(lcc.in_degree(), lcc.out_degree(), out / "degree_ccdf.png")
    return stats


# subcommands

def cmd_ingest(cfg: RunConfig) -> int:
    if not cfg.edges or not cfg.nodes:
        raise ConfigError("ingest needs --edges and --nodes")
    filters = {name: (low, high) for name, low, high in cfg.filters}
    g, cov = gs.ingest_dependency_csv(cfg.edges, cfg.nodes, q=cfg.quantiles, filters=filters or None)
    out = _out_dir(cfg)
    gs.save_graph(out / GRAPH_FILE, g, cov)
    stats = _write_stats(g, out)
    log.info("ingested %d nodes, %d edges", stats["nodes"], stats["edges"])
    return 0


def cmd_stats(cfg: RunConfig) -> int:
    path = Path(cfg.graph) if cfg.graph else Path(cfg.out) / GRAPH_FILE
    if not path.exists():
        raise DataError(f"graph artifact not found: {path}")
    g, _ = gs.load_graph(path)
    stats = _write_stats(g, _out_dir(cfg))
    json.dump(stats, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def _write_trace(path: Path, state: VariationalState) -> None:
    starts = set(state.phase_starts)
    phase = -1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "phase", "lower_bound"])
        for it, value in enumerate(state.lower_bound_trace):
            phase += it in starts
            w.writerow([it, max(phase, 0), repr(float(value))])


def cmd_fit(cfg: RunConfig) -> int:
    from .plotting import plot_trace

    g, cov = _load_graph(cfg)
    out = _out_dir(cfg)
    resume = VariationalState.from_json(cfg.resume) if cfg.resume else None
    K = resume.K if resume is not None else cfg.K
    if resume is not None:
        init = None
        log.info("resuming from %s at iteration %d", cfg.resume, resume.iterations)
    elif cfg.labels:
        init = gs.read_labels_csv(cfg.labels, g)
        log.info("initial partition read from %s (%d labels)", cfg.labels, len(np.unique(init)))
    else:
        init = gs.detect_communities(g, seed=child_seed(cfg.seed, SEED_COMMUNITIES))
        log.info("initial partition from community detection (%d communities)", init.max() + 1)
    if init is not None:
        init = fit_labels_to_k(g, init, K)

    ckpt = out / "checkpoint.json"

    def save(state):
        if cfg.checkpoint_every > 0 and state.iterations % cfg.checkpoint_every == 0:
            state.to_json(ckpt)

    try:
        state = run_vem(g, cov, K, init, max_iter=cfg.max_iter, tol=cfg.tol,
                        warm_iterations=cfg.warm_iterations, resume=resume, callback=save)
    except NumericalError as exc:
        raise NumericalError(f"type estimation: {exc}") from None
    state.to_json(ckpt)
    _write_trace(out / "trace.csv", state)
    plot_trace(state.lower_bound_trace, out / "trace.png", state.phase_starts[1:])

    types = TypeAssignment(harden_types(state.xi), K)
    gs.write_labels_csv(out / "types.csv", g, types.labels)
    try:
        result = fit_structural(g, cov, types, zero_fraction=cfg.zero_fraction,
                                seed=child_seed(cfg.seed, SEED_SUBSAMPLE))
    except NumericalError as exc:
        raise NumericalError(f"payoff estimation: {exc}") from None
    result.to_json(out / "results.json")
    result.to_csv(out / "results.csv")
    _write_json(out / "run_config.json", cfg.record())
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.params:
        raise ConfigError("simulate needs --params")
    params = StructuralParams.from_json(cfg.params)
    if cfg.graph:
        g0, cov = gs.load_graph(cfg.graph)
        node_ids = list(g0.node_ids)
        if params.covariate_names:
            try:
                cov = cov.select(params.covariate_names)
            except ValueError as exc:
                raise ConfigError(f"parameter covariate not in graph: {exc}") from None
        elif cov.num_covariates != params.num_covariates:
            raise ConfigError("parameter file and graph disagree on the number of covariates")
    elif cfg.n is not None:
        if params.num_covariates:
            raise ConfigError("parameters use covariates; pass --graph to supply them")
        node_ids = [f"n{i}" for i in range(cfg.n)]
        cov = gs.CovariateTable.empty(cfg.n)
    else:
        raise ConfigError("simulate needs --graph or --n")
    n = len(node_ids)
    if n < 2:
        raise DataError("need at least two nodes to simulate")

    if cfg.labels:
        stub = gs.DependencyGraph.from_edges(node_ids, [], [])
        labels = gs.read_labels_csv(cfg.labels, stub)
        types = TypeAssignment(labels, int(labels.max()) + 1)
    elif params.eta is not None:
        types = draw_types(params.eta, n, child_seed(cfg.seed, SEED_TYPES))
    else:
        types = TypeAssignment.single(n)

    steps = cfg.steps if cfg.steps is not None else 100 * n * (n - 1)
    g = glauber_sample(cov, types, params, steps + cfg.burn_in,
                       child_seed(cfg.seed, SEED_CHAIN), node_ids=node_ids)
    out = _out_dir(cfg)
    gs.write_edges_csv(out / "simulated_edges.csv", g)
    gs.write_labels_csv(out / "simulated_types.csv", g, types.labels)

    same = types.labels[:, None] == types.labels[None, :]
    np.fill_diagonal(same, False)
    diff = ~same
    np.fill_diagonal(diff, False)
    adj = g.dense().astype(bool)
    summary = {
        "nodes": n,
        "edges": g.edge_count,
        "steps": int(steps),
        "burn_in": int(cfg.burn_in),
        "density": g.edge_count / (n * (n - 1)),
        "within_density": float(adj[same].mean()) if same.any() else None,
        "between_density": float(adj[diff].mean()) if diff.any() else None,
        "type_counts": np.bincount(types.labels, minlength=types.K).tolist(),
        "params": params.to_dict(),
    }
    _write_json(out / "simulated_summary.json", summary)
    _write_json(out / "run_config.json", cfg.record())
    return 0


def _read_protect_list(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def _contagion(cfg: RunConfig, strategies) -> int:
    from .plotting import plot_protection_curves

    g, _ = _load_graph(cfg)
    specs = []
    for strategy in strategies:
        if strategy == "explicit-list":
            if not cfg.protect_list:
                raise ConfigError("explicit-list strategy needs --protect-list")
            nodes = _read_protect_list(cfg.protect_list)
            for name in nodes:
                try:
                    g.index_of(name)
                except KeyError:
                    raise DataError(f"{cfg.protect_list}: unknown repository {name!r}") from None
            specs.append(ctg.ProtectionSpec(strategy, len(nodes), nodes))
        else:
            specs.extend(ctg.ProtectionSpec(strategy, count) for count in cfg.l_list)
    report = ctg.protection_experiment(g, specs, cfg.k_list, workers=cfg.workers,
                                       protected_seed_value=cfg.protected_seed_value,
                                       include_baseline=True)
    out = _out_dir(cfg)
    report.write(out)
    if specs:
        plot_protection_curves(report.protection_curves, out / "protection.png")
    _write_json(out / "run_config.json", cfg.record())
    return 0


def cmd_contagion(cfg: RunConfig) -> int:
    return _contagion(cfg, cfg.strategies)


def cmd_protect(cfg: RunConfig) -> int:
    if not cfg.strategies:
        raise ConfigError("protect needs at least one strategy")
    return _contagion(cfg, cfg.strategies)


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "contagion": cmd_contagion,
    "protect": cmd_protect,
}


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        return COMMANDS[cfg.command](cfg)
    except ReponetError as exc:
        print(f"reponet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"reponet: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
