"""Exception hierarchy shared by all modules."""


class SearchBiasError(Exception):
    """Base class for package errors."""


class StructuralError(SearchBiasError):
    """Malformed graph: cycles, self-loops, dangling edges."""


class IdentificationError(SearchBiasError):
    """Unknown node or a conditioning set that fails the back-door criterion."""


class DegenerateSupportError(SearchBiasError):
    """A conditioning cell has zero probability."""


class PanelValidationError(SearchBiasError, ValueError):
    """Input panel failed validation."""


class MissingColumnError(PanelValidationError):
    pass


class DateGapError(PanelValidationError):
    pass


class DuplicateDateError(PanelValidationError):
    pass


class NegativeValueError(PanelValidationError):
    pass


class MissingValueError(PanelValidationError):
    pass


class AlignmentError(SearchBiasError, ValueError):
    """Daily count table is not on a contiguous date grid."""


class RankError(SearchBiasError):
    """Design or penalized system is rank deficient."""

    def __init__(self, message, aliased=()):
        super().__init__(message)
        self.aliased = list(aliased)


class ConvergenceError(SearchBiasError):
    """Smoothing parameter search did not converge; carries the best fit so far."""

    def __init__(self, message, best_fit=None):
        super().__init__(message)
        self.best_fit = best_fit


class EstimationError(SearchBiasError):
    """Estimator precondition failed (collinearity, sample size, zero spend)."""


class ConfigError(SearchBiasError, ValueError):
    """Invalid simulator or CLI configuration."""
