"""Exception types shared across the package."""


class GcmError(Exception):
    """Base class for errors raised by this package."""


class DataError(GcmError, ValueError):
    """Malformed or invalid input data."""


class DegenerateStatisticError(GcmError, ArithmeticError):
    """A residual-product vector has (numerically) zero variance."""

    def __init__(self, message: str, pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.pair = pair


class InsufficientSampleError(GcmError, ValueError):
    """Too few observations for the requested procedure."""
