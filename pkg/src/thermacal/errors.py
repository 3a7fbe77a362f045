"""Exception types shared across the package."""


class ThermacalError(Exception):
    """Base class for all library errors."""


class ContractError(ThermacalError):
    """An argument violates an interface contract (shape, size, configuration)."""


class DomainError(ThermacalError):
    """A numeric input lies outside the function's domain (non-finite, non-positive, ...)."""


class NumericalError(ThermacalError):
    """A numerical routine failed to produce a usable result."""


class CholeskyError(NumericalError):
    """Cholesky factorization failed even after jitter escalation.

    `pivot` is the 1-based index of the offending pivot, or -1 when unknown.
    """

    def __init__(self, message, pivot=-1):
        super().__init__(message)
        self.pivot = pivot
