"""Exception types raised across the package."""


class SeqBellError(Exception):
    """Base class for all package errors."""


class DomainError(SeqBellError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class NotHermitian(SeqBellError, ValueError):
    pass


class CapacityError(SeqBellError, ValueError):
    """Requested object would exceed a configured size cap."""


class ConditioningError(SeqBellError, ValueError):
    pass


class NormalizationError(SeqBellError, ValueError):
    pass


class ConsistencyError(SeqBellError, ValueError):
    """Input distribution violates no-signaling."""


class SolverError(SeqBellError, RuntimeError):
    """The SDP backend did not reach an optimal point.

    ``diagnostics`` holds the last status and residuals when available.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NotFound(SeqBellError, LookupError):
    pass
