"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and its
subclasses) -> 2, NumericError -> 3.
"""


class HsinetError(Exception):
    """Base class for all package errors."""


class ConfigError(HsinetError):
    """Invalid configuration: bad spec fields, malformed config files, bad flags."""


class DataError(HsinetError):
    """Invalid or inconsistent data: parse failures, label problems, empty splits."""


class ShapeError(DataError):
    """Tensor shape mismatch; the message names both shapes."""


class CheckpointError(DataError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class NumericError(HsinetError):
    """Non-finite value encountered during training."""
