"""Robust day-ahead energy and reserve scheduling for networked microgrids.

The package clears an internal energy market between microgrid operators by
iterative price adjustment, checks it against a pooled centralized solve, and
ships its own convex QP solver with KKT certificates.
"""

from .centralized import CentralOutcome, duality_gap, solve_centralized
from .domain import ConfigError, MmgConfig, load_config, load_config_file
from .market import MarketOutcome, clamp_and_settle, clear_market, pso_income, run_isolated, subgradient_step
from .qp import QpProblem, QpSolution, kkt_residuals, solve_qp
from .scenarios import build_orthogonal_array, deterministic_scenarios, realize_scenarios
from .subproblem import MgDispatch, MicrogridOperator, build_mg_problem, solve_mg

__all__ = [
    "CentralOutcome", "ConfigError", "MarketOutcome", "MgDispatch", "MicrogridOperator", "MmgConfig",
    "QpProblem", "QpSolution", "build_mg_problem", "build_orthogonal_array", "clamp_and_settle",
    "clear_market", "deterministic_scenarios", "duality_gap", "kkt_residuals", "load_config",
    "load_config_file", "pso_income", "realize_scenarios", "run_isolated", "solve_centralized", "solve_mg",
    "solve_qp", "subgradient_step",
]
