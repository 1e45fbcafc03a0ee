"""Exception types shared across the package.

The CLI maps ``ValidationError``/``ConfigError``/``FormatError`` to exit code 2
and ``NumericError`` to exit code 3.
"""


class ValidationError(ValueError):
    """Input violates an operation's preconditions."""


class ConfigError(ValidationError):
    """A configuration value is missing or inconsistent."""


class FormatError(ValidationError):
    """A file does not parse as the expected binary/text format."""


class PreconditionError(RuntimeError):
    """Operation called in a state that does not allow it (e.g. untrained postnet)."""


class NumericError(RuntimeError):
    """NaN/Inf or exploding values detected during optimisation."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
