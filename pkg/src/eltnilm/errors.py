"""Exception hierarchy. Each family maps to a stable CLI exit code."""


class EltError(Exception):
    exit_code = 1


class ConfigError(EltError, ValueError):
    """Invalid configuration or hyperparameters.

    ``errors`` holds every violated invariant when several were found at once.
    """

    exit_code = 2

    def __init__(self, message, errors=None):
        self.errors = list(errors) if errors else [str(message)]
        super().__init__(message)


class DimensionError(EltError, ValueError):
    exit_code = 2


class DataError(EltError, ValueError):
    exit_code = 3


class NumericError(EltError, FloatingPointError):
    exit_code = 4


class UsageError(EltError, RuntimeError):
    exit_code = 2
