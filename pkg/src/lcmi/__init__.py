"""Inference for parameters restricted by linear conditional moment inequalities."""

from .covariance import MatchingConfig, estimate_sigma, prune_dependent_columns
from .critical_values import (
    SimDraws,
    TruncationBounds,
    conditional_critical_value,
    hybrid_upper_bound,
    lf_critical_value,
    lfp_critical_value,
    truncation_bounds_bisection,
    truncation_bounds_closed_form,
)
from .inference import (
    ConfidenceSet,
    EmptyConfidenceSet,
    TestDecision,
    TestSpec,
    invert_grid,
    linear_ci_bound,
    project_nonlinear_nuisance,
    run_test,
    run_tests,
)
from .lp import LpSolution, enumerate_dual_vertices, solve_primal_dual
from .moments import NormalModel, ObservationSet, build_normal_model, transform_linear_target

__version__ = "0.1.0"

__all__ = [
    "ConfidenceSet",
    "EmptyConfidenceSet",
    "LpSolution",
    "MatchingConfig",
    "NormalModel",
    "ObservationSet",
    "SimDraws",
    "TestDecision",
    "TestSpec",
    "TruncationBounds",
    "build_normal_model",
    "conditional_critical_value",
    "enumerate_dual_vertices",
    "estimate_sigma",
    "hybrid_upper_bound",
    "invert_grid",
    "lf_critical_value",
    "lfp_critical_value",
    "linear_ci_bound",
    "project_nonlinear_nuisance",
    "prune_dependent_columns",
    "run_test",
    "run_tests",
    "solve_primal_dual",
    "transform_linear_target",
    "truncation_bounds_bisection",
    "truncation_bounds_closed_form",
]
