"""Exception hierarchy shared by every subpackage."""


class RaznError(Exception):
    """Base class for all package errors."""


class ConfigError(RaznError, ValueError):
    """Invalid configuration: shapes, sizes, divisibility, unknown keys."""


class ValidationError(RaznError, ValueError):
    """Input data violates an operation's contract."""


class DegenerateBatchError(ValidationError):
    """Batch statistics are undefined (a single value per channel)."""


class PatchRangeError(RaznError, IndexError):
    """A patch window falls outside its pyramid level."""


class MaxMagnificationError(RaznError):
    """Zoom requested past the finest pyramid level."""


class NumericError(RaznError, FloatingPointError):
    """Non-finite loss or gradient encountered."""


class UndefinedMetricError(RaznError, ValueError):
    """A metric has no defined value for the given counts."""


class ArtifactMismatchError(RaznError):
    """A checkpoint does not match the dataset or config it is used with."""
