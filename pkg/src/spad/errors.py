"""Exception types shared across the toolkit."""


class SpadError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(SpadError, ValueError):
    """Tensor shapes are incompatible with the configured architecture."""


class DivergenceError(SpadError, RuntimeError):
    """A non-finite loss or gradient was produced during training."""


class ConfigError(SpadError, ValueError):
    """Invalid or conflicting configuration."""


class CheckpointError(SpadError, ValueError):
    """Checkpoint archive is corrupted or has an incompatible schema."""


class ManifestError(SpadError, ValueError):
    """Manifest file violates the CSV schema or its invariants."""


class SingleClassError(SpadError, ValueError):
    """Metric computation needs both bona fide and attack entries."""
