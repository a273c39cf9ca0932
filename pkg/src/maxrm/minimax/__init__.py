"""Solvers for the min-max leaf value problem and its tree-weight variant."""
from .stats import LeafEnvStats
from .solvers import (
    METHODS, PRECISE, LocalSolution, SolverConfig, SolverError, SolverResult, active_set,
    bcd_posthoc, extragradient_posthoc, extragradient_weights, kkt_local_solve,
    project_simplex, solve_posthoc, weighted_leaf_means,
)

__all__ = [
    "LeafEnvStats", "METHODS", "PRECISE", "LocalSolution", "SolverConfig", "SolverError",
    "SolverResult", "active_set", "bcd_posthoc", "extragradient_posthoc",
    "extragradient_weights", "kkt_local_solve", "project_simplex", "solve_posthoc",
    "weighted_leaf_means",
]
