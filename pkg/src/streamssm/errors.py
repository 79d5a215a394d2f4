"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4, anything else -> 5.
"""


class StreamSsmError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(StreamSsmError):
    """Invalid or inconsistent configuration."""


class DataError(StreamSsmError):
    """Missing, malformed, or out-of-range input data."""


class NumericError(StreamSsmError):
    """Non-finite values or other numeric-domain violations."""


class ShapeError(StreamSsmError):
    """Tensor shape mismatch between operands."""
