"""Simulation and diagnostics toolkit for balanced multi-company markets."""

__version__ = "0.1.0"

from . import errors
from .market_model import (
    ConstraintKind,
    ConstraintSet,
    MarketParams,
    PathGrid,
    Portfolio,
    ProcessSpec,
    SpecKind,
    eval_spec,
    psd_factor,
    validate_params,
)
from .sde_engine import (
    PathSet,
    lift_to_capitalizations,
    pathset_summary,
    pathset_to_csv,
    relative_caps_from_caps,
    simulate_capitalizations,
    simulate_relative_caps_balanced,
)
from .growth_opt import (
    GrowthSolution,
    growth_optimal_constrained,
    growth_optimal_hyperplane,
    growth_rate,
    implied_interest_rate,
    numeraire_condition,
    perfect_balance_residual,
)
from .balance_diag import (
    BalanceReport,
    DistanceMatrix,
    LimitingDistribution,
    classify_outcome,
    distance_matrix,
    equivalence_classes,
    limiting_distribution,
    lln_diagnostic,
    loss_of_balance,
)
from .jump_markets import (
    JumpSpec,
    LifetimeRecord,
    drift_from_balance_jump,
    example_death_of_company,
    growth_optimal_jump,
    loss_of_balance_jump,
    pairwise_distance_jump,
    simulate_jump_balanced,
)
from .scenario_cli import BUILTINS, parse_config, replay_summary, run_scenario

__all__ = [
    "__version__",
    "errors",
    "ConstraintKind",
    "ConstraintSet",
    "MarketParams",
    "PathGrid",
    "Portfolio",
    "ProcessSpec",
    "SpecKind",
    "eval_spec",
    "psd_factor",
    "validate_params",
    "PathSet",
    "lift_to_capitalizations",
    "pathset_summary",
    "pathset_to_csv",
    "relative_caps_from_caps",
    "simulate_capitalizations",
    "simulate_relative_caps_balanced",
    "GrowthSolution",
    "growth_optimal_constrained",
    "growth_optimal_hyperplane",
    "growth_rate",
    "implied_interest_rate",
    "numeraire_condition",
    "perfect_balance_residual",
    "BalanceReport",
    "DistanceMatrix",
    "LimitingDistribution",
    "classify_outcome",
    "distance_matrix",
    "equivalence_classes",
    "limiting_distribution",
    "lln_diagnostic",
    "loss_of_balance",
    "JumpSpec",
    "LifetimeRecord",
    "drift_from_balance_jump",
    "example_death_of_company",
    "growth_optimal_jump",
    "loss_of_balance_jump",
    "pairwise_distance_jump",
    "simulate_jump_balanced",
    "BUILTINS",
    "parse_config",
    "replay_summary",
    "run_scenario",
]
