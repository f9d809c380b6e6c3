"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``ConfigError`` -> 1 (usage),
``DataError`` -> 2, ``NumericError`` -> 3.
"""


class StreamFMError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(StreamFMError, ValueError):
    """Invalid configuration or parameter values."""


class DataError(StreamFMError):
    """Problem with input data or files."""


class InsufficientInputError(DataError, ValueError):
    """Audio is shorter than one analysis window."""


class SilentInputError(DataError, ValueError):
    """Signal has zero energy where energy is required."""


class CorruptFileError(DataError):
    """A binary file failed validation (bad magic, truncated, checksum)."""


class VersionMismatchError(CorruptFileError):
    pass


class StreamClosedError(StreamFMError, RuntimeError):
    pass


class NumericError(StreamFMError, FloatingPointError):
    """Non-finite values appeared during a computation."""
