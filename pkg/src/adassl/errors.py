"""Exception hierarchy shared by every module.

The CLI maps :class:`UsageError` and its subclasses to exit code 2 and
:class:`NumericError` to exit code 3.
"""


class AdaError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(AdaError, ValueError):
    """An operation was called with arguments it cannot accept."""


class DimensionError(UsageError):
    """Tensor shapes do not conform."""


class ConfigError(UsageError):
    """A configuration value is out of its valid range."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ValidationError(UsageError):
    """Input data violates a documented precondition."""


class ParseError(UsageError):
    """A file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(AdaError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DegenerateInputError(NumericError):
    """Inputs make the requested quantity undefined."""
