"""Exception hierarchy shared by all modules."""


class SemistableError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(SemistableError, ValueError):
    pass


class RangeError(SemistableError, ValueError):
    pass


class EvaluationDomainError(SemistableError, ArithmeticError):
    pass


class SaturationError(EvaluationDomainError, OverflowError):
    pass


class NoSolutionError(SemistableError):
    """Shooting found no zero of the profile before ``r_max``."""


class BracketNotFoundError(SemistableError):
    pass


class NonConvergenceError(SemistableError):
    """An iteration failed to converge; ``last`` holds the final iterate or estimate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class LinearSolveError(SemistableError):
    pass


class DegenerateFieldError(SemistableError):
    pass


class InsufficientDataError(SemistableError):
    pass


class ContradictionError(SemistableError):
    pass


class ConfigError(SemistableError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
