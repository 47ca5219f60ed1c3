"""Exception types shared across the package."""


class SpecmixError(Exception):
    """Base class for all package errors."""


class ValidationError(SpecmixError, ValueError):
    """Input data or arguments violate a precondition."""


class NumericalError(SpecmixError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""
