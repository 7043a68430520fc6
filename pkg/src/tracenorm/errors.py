"""Exception types shared across the package."""


class TraceNormError(Exception):
    """Base class for all package errors."""


class InvalidInput(TraceNormError, ValueError):
    """Malformed or out-of-domain input (non-finite entries, bad shapes, ...)."""


class InfeasibleDual(TraceNormError):
    """The quadratic is singular and vec(Q) leaves its range: objective unbounded."""


class NonConverged(TraceNormError):
    """Newton iteration cap reached. ``result`` holds the best iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
