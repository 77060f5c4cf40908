"""Dependency-graph formation models and vulnerability contagion analytics."""

from .contagion import (
    ContagionReport,
    ProtectionSpec,
    betweenness,
    expected_fatality,
    expected_systemicness_ranking,
    k_step_systemicness,
    protection_experiment,
    systemicness,
    systemicness_distribution,
)
from .errors import ConfigError, DataError, NumericalError, ReponetError
from .formation_model import (
    StructuralParams,
    TypeAssignment,
    change_statistic,
    exact_stationary_logprob,
    glauber_sample,
    potential,
)
from .graph_store import (
    CovariateTable,
    DegreeSummary,
    DependencyGraph,
    degree_stats,
    detect_communities,
    discretize_quartiles,
    eigenvector_centrality,
    ingest_dependency_csv,
    largest_weak_component,
)
from .mple_fit import FitResult, fit_structural
from .vem_blocks import VariationalState, harden_types, run_vem

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContagionReport",
    "CovariateTable",
    "DataError",
    "DegreeSummary",
    "DependencyGraph",
    "FitResult",
    "NumericalError",
    "ProtectionSpec",
    "ReponetError",
    "StructuralParams",
    "TypeAssignment",
    "VariationalState",
    "betweenness",
    "change_statistic",
    "degree_stats",
    "detect_communities",
    "discretize_quartiles",
    "eigenvector_centrality",
    "exact_stationary_logprob",
    "expected_fatality",
    "expected_systemicness_ranking",
    "fit_structural",
    "glauber_sample",
    "harden_types",
    "ingest_dependency_csv",
    "k_step_systemicness",
    "largest_weak_component",
    "potential",
    "protection_experiment",
    "run_vem",
    "systemicness",
    "systemicness_distribution",
]
