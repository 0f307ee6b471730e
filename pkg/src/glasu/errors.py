"""Exception hierarchy. The CLI maps each class to a distinct exit code."""


class GlasuError(Exception):
    exit_code = 1


class ConfigError(GlasuError, ValueError):
    """Inconsistent or invalid configuration (shapes, plans, hyperparameters)."""

    exit_code = 2


class ProtocolError(GlasuError):
    """Malformed frame, unexpected message, or a peer that went away."""

    exit_code = 3


class DataError(GlasuError):
    """Unreadable or inconsistent dataset files."""

    exit_code = 4


class NumericalError(GlasuError, FloatingPointError):
    exit_code = 5
