"""Exception types shared across the package.

ConfigError maps to CLI exit code 2 (usage/config problems); everything
else surfaces as a runtime failure (exit code 1).
"""


class ConfigError(ValueError):
    """Invalid configuration: bad layout, unknown key, unknown variant."""


class DimensionError(ValueError):
    """Tensor shape does not match the declared layout."""


class DataError(ValueError):
    """Manifest parsing, image ingestion, or integrity failure."""


class GenerationError(ValueError):
    """Infeasible synthetic-data specification."""


class UndefinedAucError(ValueError):
    """AUC requested for a label column with only one class present."""


class ReportError(ValueError):
    """No usable class remained for a metrics report."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, incomplete, or incompatible."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
