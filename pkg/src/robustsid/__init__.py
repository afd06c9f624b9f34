"""Outlier-robust subspace identification from input/output records."""

from .bounds import PenaltyBounds, lambda_nuc_max, lambda_sparse_max, penalty_bounds
from .estimator import RobustSubspaceIdentifier
from .exceptions import (
    DegenerateProblemError,
    InfeasibleCertificateError,
    NonConvergenceError,
    OrderSelectionError,
    RankDeficientWarning,
    RecordTooShortError,
)
from .hankel import GOperator, HankelParams, IoRecord, adjoint_g, apply_g, build_g_operator
from .realization import OrderPolicy, StateSpaceModel, identify, simulate
from .solver import Penalties, RobustProblem, SolveOptions, SolveResult, solve_robust
from .tuning import GridSpec, TuningSurface, cross_validate, grid_search, knee_point

__all__ = [
    "IoRecord",
    "HankelParams",
    "GOperator",
    "build_g_operator",
    "apply_g",
    "adjoint_g",
    "Penalties",
    "RobustProblem",
    "SolveOptions",
    "SolveResult",
    "solve_robust",
    "PenaltyBounds",
    "lambda_sparse_max",
    "lambda_nuc_max",
    "penalty_bounds",
    "StateSpaceModel",
    "OrderPolicy",
    "identify",
    "simulate",
    "GridSpec",
    "TuningSurface",
    "grid_search",
    "cross_validate",
    "knee_point",
    "RobustSubspaceIdentifier",
    "RecordTooShortError",
    "DegenerateProblemError",
    "InfeasibleCertificateError",
    "NonConvergenceError",
    "OrderSelectionError",
    "RankDeficientWarning",
]
