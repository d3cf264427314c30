"""Exception hierarchy shared across the package."""


class CogAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(CogAdaptError, ValueError):
    """Invalid configuration value or combination."""


class DimensionError(CogAdaptError, ValueError):
    """Array shapes or channel counts do not line up."""


class SignalError(CogAdaptError, ValueError):
    """A signal cannot be processed (too short, empty after cleanup, ...)."""


class NonFiniteError(CogAdaptError, FloatingPointError):
    """A NaN or infinity appeared where a finite value is required."""


class UndefinedMetricError(CogAdaptError, ValueError):
    """The metric is mathematically undefined for the given input."""


class FormatError(CogAdaptError, ValueError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CheckpointShapeError(FormatError):
    pass


class CsvFormatError(FormatError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row
