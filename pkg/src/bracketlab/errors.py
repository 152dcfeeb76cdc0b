"""Exception hierarchy shared across the package.

CLI exit codes: ConfigurationError and ValidationError map to exit code 1,
everything else unexpected maps to exit code 2.
"""


class BracketLabError(Exception):
    pass


class ConfigurationError(BracketLabError):
    """Invalid spec, config, or argument combination."""


class ValidationError(BracketLabError):
    """Data that violates a format or language contract."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (position {position})"
        super().__init__(message)
        self.position = position


class StateError(BracketLabError):
    """Generator state that is inconsistent or unreachable."""


class NumericalError(BracketLabError):
    """Non-finite values encountered during optimization."""
