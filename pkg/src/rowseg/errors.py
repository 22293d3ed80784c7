"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes: usage/configuration problems
exit 1, data problems exit 2, numeric failures exit 3.
"""


class RowsegError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(RowsegError):
    """An operation was called with arguments violating its contract."""


class ConfigurationError(RowsegError):
    """A config value (or combination) is invalid."""


class DataError(RowsegError):
    """A data file or dataset is malformed or inconsistent."""


class MagicError(DataError):
    """File magic/format tag does not match the expected format."""


class MaxvalError(DataError):
    """Netpbm maxval is not 255."""


class DimensionMismatchError(DataError):
    """Image and label dimensions disagree."""


class LabelRangeError(DataError):
    """Label map contains an id outside [0, K) that is not the ignore id."""


class ChecksumError(DataError):
    """Checkpoint CRC-32 check failed (truncation or corruption)."""


class NumericError(RowsegError):
    """A non-finite value appeared where the contract requires finite ones."""
