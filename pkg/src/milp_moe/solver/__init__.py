"""Exact MILP machinery for desk-scale instances."""

from .bnb import BnbResult, BnbStatus, Limits, SolverError, branch_and_bound, is_feasible_solution, solve_trust_region
from .lp import TrustRegion, solve_lp
from .oracle import OracleReport, OracleSizeError, brute_force, energy_distribution, oracle_check
from .pool import PoolError, SolutionPool, collect_pool, pool_path, pool_weights, read_pool, write_pool
from .simplex import LpSolution, LpStatus, SimplexIterationLimit, simplex

__all__ = [
    "BnbResult", "BnbStatus", "Limits", "SolverError", "branch_and_bound", "is_feasible_solution",
    "solve_trust_region", "TrustRegion", "solve_lp", "OracleSizeError", "brute_force",
    "energy_distribution", "OracleReport", "oracle_check", "PoolError", "SolutionPool", "collect_pool", "pool_path", "pool_weights",
    "read_pool", "write_pool", "LpSolution", "LpStatus", "SimplexIterationLimit", "simplex",
]
