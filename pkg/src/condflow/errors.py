"""Exception types shared across the package."""


class CondflowError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CondflowError, ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(CondflowError, ArithmeticError):
    """A non-finite value appeared where finite math is required."""


class ConfigError(CondflowError, ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(CondflowError, ValueError):
    """Input data is missing, malformed, or inconsistent."""


class DegenerateDataError(CondflowError, ValueError):
    """Data has no usable structure (e.g. zero variance for PCA)."""


class CheckpointError(CondflowError):
    """Base class for checkpoint read/write failures."""


class CorruptCheckpointError(CheckpointError):
    """Magic bytes or framing of a checkpoint file are damaged."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor shapes do not match the declared architecture."""
