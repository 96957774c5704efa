"""Exception types shared across the package.

Every CLI-visible failure maps to one of these classes so the harness can
emit a single machine-parsable ``Class: message`` line.
"""


class SwinCDError(Exception):
    """Base class for all package errors."""


class DimensionError(SwinCDError, ValueError):
    """A tensor or image has an incompatible shape; message names the axis."""


class ConfigurationError(SwinCDError, ValueError):
    """A config value is invalid or inconsistent with the requested mode."""


class InputValidationError(SwinCDError, ValueError):
    """Input data violates a documented precondition (e.g. non-binary mask)."""


class ScheduleError(SwinCDError, ValueError):
    """Learning-rate schedule queried outside its epoch range."""


class CheckpointVersionError(SwinCDError, ValueError):
    """Checkpoint format or model config incompatible with this build."""


class GenerationError(SwinCDError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DatasetError(SwinCDError, OSError):
    """Dataset directory or manifest is missing or malformed."""
