"""Exception types shared across the package."""


class TaskMorphError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TaskMorphError):
    """Invalid configuration value or combination."""


class DataError(TaskMorphError):
    """Malformed or out-of-range input data."""


class NumericError(TaskMorphError):
    """Non-finite or otherwise unusable numeric input."""


class CalibrationError(TaskMorphError):
    """Noise calibration target unattainable within the search range."""


class CheckpointError(TaskMorphError):
    """Unreadable or corrupted checkpoint archive."""


class ProtocolError(TaskMorphError):
    """Structurally invalid wire frame (bad magic, unknown codes, oversize)."""


class CorruptionError(TaskMorphError):
    """Frame failed its integrity check."""


class IncompleteFrame(TaskMorphError):
    """Not enough bytes for a complete frame; caller should read more."""


class SessionError(TaskMorphError):
    """Split-runtime session failure (timeout, key mismatch, desync)."""
