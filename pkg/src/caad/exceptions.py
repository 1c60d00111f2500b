"""Exception types raised across the package."""


class CAADError(Exception):
    """Base class for all package errors."""


class ConfigError(CAADError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CAADError, ValueError):
    """Malformed dataset, manifest line or shape mismatch."""


class DivergenceError(CAADError, FloatingPointError):
    """A loss or gradient became non-finite during training."""


class CheckpointError(CAADError, ValueError):
    """Checkpoint payload is corrupt, truncated or of an unknown version."""
