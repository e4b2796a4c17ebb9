"""Numerical laboratory for semi-stable solutions of -Δu = λ g(u).

Radial shooting and branch tracing on balls, finite-difference Newton solves on
convex planar domains, level-set geometry of the computed fields, and audits of
the a priori inequalities satisfied by semi-stable solutions.
"""

from .errors import (
    ArgumentError,
    BracketNotFoundError,
    ContradictionError,
    DegenerateFieldError,
    EvaluationDomainError,
    InsufficientDataError,
    LinearSolveError,
    NoSolutionError,
    NonConvergenceError,
    RangeError,
    SaturationError,
    SemistableError,
)
from .nonlinearity import ConditionReport, Nonlinearity, check_conditions, eval_triplet

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "BracketNotFoundError",
    "ConditionReport",
    "ContradictionError",
    "DegenerateFieldError",
    "EvaluationDomainError",
    "InsufficientDataError",
    "LinearSolveError",
    "NoSolutionError",
    "NonConvergenceError",
    "Nonlinearity",
    "RangeError",
    "SaturationError",
    "SemistableError",
    "check_conditions",
    "eval_triplet",
]
