"""Exception hierarchy.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3 and numeric failures with 4.
"""


class RAAFError(Exception):
    exit_code = 1


class ConfigError(RAAFError, ValueError):
    exit_code = 2


class DataError(RAAFError, ValueError):
    exit_code = 3


class DimensionError(RAAFError, ValueError):
    """Raised when tensor shapes do not conform."""

    exit_code = 4


class StateError(RAAFError, RuntimeError):
    """Raised when a backward pass is requested without a forward cache."""

    exit_code = 4


class NumericError(RAAFError, FloatingPointError):
    """Non-finite values showed up during training."""

    exit_code = 4
