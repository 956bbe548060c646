"""Shared exception types."""


class KamflowError(Exception):
    pass


class BadInputError(KamflowError, ValueError):
    """Rejected inputs: non-finite values, shape mismatches, unknown names."""


class StepTooSmallError(KamflowError):
    """Requested evolution time below the supported resolution."""


class ConvergenceError(KamflowError):
    """An iteration failed to converge; carries the residual history."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class AmbiguousMinimizerError(KamflowError):
    """Distinct minimizer basins with action values within tolerance."""

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = candidates


class MonotonicityError(KamflowError):
    """A trajectory violated the nondecreasing-value invariant."""


class InvariantError(KamflowError):
    """A structural invariant check failed during a computation."""
