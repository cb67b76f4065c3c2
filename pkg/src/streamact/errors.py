"""Exception hierarchy shared across the package."""


class StreamactError(Exception):
    """Base class for all package errors."""


class DimensionError(StreamactError):
    """Shape or axis mismatch, including empty sequences where one is required."""


class WindowError(StreamactError):
    """A sample window has the wrong number of rows."""


class LabelError(StreamactError):
    """A class label is outside the valid 0..C range."""


class ConfigError(StreamactError):
    """Invalid configuration value or inconsistent configuration."""


class FormatError(StreamactError):
    """Malformed binary file (bad magic, version, or truncation)."""


class NumericError(StreamactError):
    """Non-finite value encountered where the computation must abort."""


class ContractError(StreamactError):
    """An operation was called outside its contract (e.g. non-scalar backward root)."""
