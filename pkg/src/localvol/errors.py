"""Exception types shared across the package."""


class LocalVolError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LocalVolError, ValueError):
    """Inputs violate a documented precondition (bad grids, bounds, formats)."""


class NumericalFailureError(LocalVolError, ArithmeticError):
    """A solver produced non-finite values or a linear solve broke down."""


class QuoteFormatError(InvalidInputError):
    """A quote CSV is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class PriceBoundError(InvalidInputError):
    """An option price lies outside the no-arbitrage band.

    ``bound`` is ``"lower"`` or ``"upper"`` depending on which side failed.
    """

    def __init__(self, message: str, bound: str):
        super().__init__(message)
        self.bound = bound


class DegeneratePairError(InvalidInputError):
    """Two surfaces are too close for a ratio test to be meaningful."""


class InsufficientDataError(InvalidInputError):
    """Not enough quotes to build a gridded price surface."""
