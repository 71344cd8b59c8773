"""Exception types shared across the package."""


class TurbRestoreError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TurbRestoreError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(TurbRestoreError, ArithmeticError):
    """An operation produced NaN or Inf; never propagated silently."""


class ImageFormatError(TurbRestoreError, ValueError):
    """Image file cannot be decoded: bad signature, header, depth, or payload."""


class ContractViolationError(TurbRestoreError, RuntimeError):
    """A runtime contract was broken, e.g. mutating frozen weights or
    sampling from an untrained noise estimator."""


class CheckpointError(TurbRestoreError, ValueError):
    """Checkpoint file is missing, corrupt, or version-incompatible."""


class ConfigError(TurbRestoreError, ValueError):
    """Malformed configuration file or invalid configuration value."""


class TrainingDivergedError(TurbRestoreError, RuntimeError):
    """Training loss became non-finite; aborted with diagnostics."""
