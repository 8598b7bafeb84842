"""Exception types shared across the package."""


class SaltMpcError(Exception):
    """Base class for all package-specific errors."""


class ModelError(SaltMpcError):
    """Unknown mode/transition or inconsistent model definition."""


class EvaluationError(SaltMpcError):
    """A model evaluator returned non-finite or mis-shaped values."""


class ScheduleError(SaltMpcError):
    """Invalid mode schedule or node layout."""


class EventError(SaltMpcError):
    """A contact event could not be processed (e.g. no transversal guard)."""


class CovarianceError(SaltMpcError):
    """A covariance iterate violated symmetry/PSD tolerances."""


class NumericalError(SaltMpcError):
    """Singular or indefinite linear algebra encountered by the solver."""


class ProblemError(SaltMpcError):
    """Inconsistent OCP definition (dimensions, constraint designations)."""
