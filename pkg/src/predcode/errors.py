"""Exception types raised across the package."""


class PredCodeError(Exception):
    """Base class for all package errors."""


class StructuralError(PredCodeError, ValueError):
    """Shapes or dimensions are inconsistent."""


class DomainError(PredCodeError, ValueError):
    """A numeric argument is outside its mathematical domain (e.g. a non-PD precision)."""


class ArgumentError(PredCodeError, ValueError):
    """A call received an invalid or missing argument."""


class UnsupportedConfigurationError(PredCodeError, ValueError):
    """The requested combination of options is not supported by an operation."""


class DivergenceError(PredCodeError, ArithmeticError):
    """An iterative scheme produced non-finite values."""

    def __init__(self, message, layer=None, iteration=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


class NumericalError(PredCodeError, ArithmeticError):
    """A linear-algebra step failed (e.g. singular matrix)."""


class FormatError(PredCodeError, ValueError):
    """A binary or text document does not follow its format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(PredCodeError, RuntimeError):
    """An operation was called before its prerequisites ran."""
