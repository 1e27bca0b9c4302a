"""Exception hierarchy shared by the whole package.

Each class maps to a process exit code for the CLI:
config errors -> 2, data errors -> 3, numeric errors -> 4.
"""


class RaterBayesError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(RaterBayesError):
    """Invalid configuration, option value, or incompatible objects."""

    exit_code = 2


class DimensionError(ConfigError):
    """Shape or extent mismatch between arrays/tensors."""


class UsageError(ConfigError):
    """API misuse, e.g. backward on a non-scalar or on a spent graph."""


class DataError(RaterBayesError):
    """Bad or missing data on disk, or invalid dataset content."""

    exit_code = 3


class NumericError(RaterBayesError):
    """Non-finite values or numerically undefined results."""

    exit_code = 4


class MeasurementError(NumericError):
    """A clinical measurement is undefined for the given masks."""
