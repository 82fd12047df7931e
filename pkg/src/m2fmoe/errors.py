"""Exception hierarchy shared by every module.

The CLI maps the three families below onto exit codes:
``ConfigError`` -> 2, ``DataError`` -> 3, ``NumericError`` -> 4.
"""


class M2FMoEError(Exception):
    """Base class for all package errors."""


class ConfigError(M2FMoEError, ValueError):
    """Invalid configuration, hyperparameter or argument."""


class ShapeError(ConfigError):
    """Operand shapes are incompatible."""


class ContractError(ConfigError):
    """A precondition of an operation was violated by the caller."""


class PartitionError(ConfigError):
    """Band boundaries cannot form a valid partition."""


class CoverageError(ConfigError):
    """A band boundary maps outside the wavelet scale grid."""


class DataError(M2FMoEError):
    """Problem with input data."""


class IngestionError(DataError):
    """A CSV row could not be parsed."""


class OrderingError(DataError):
    """Timestamps are not strictly increasing."""


class LengthError(DataError):
    """A series or window is too short for the requested operation."""


class GmmError(DataError):
    """Mixture fitting failed (degenerate data or components)."""


class ThresholdError(DataError):
    """Extreme-value thresholds are not ordered."""


class NumericError(M2FMoEError, ArithmeticError):
    """Non-finite values appeared during evaluation or training."""
