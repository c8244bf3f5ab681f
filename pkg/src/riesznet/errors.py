"""Exception types raised across the package."""


class RieszNetError(Exception):
    """Base class for all package errors."""


class InvalidSizeError(RieszNetError, ValueError):
    pass


class ShapeError(RieszNetError, ValueError):
    pass


class NumericError(RieszNetError, ArithmeticError):
    """Non-finite values or an unusable numerical result."""


class ValidationError(RieszNetError, ValueError):
    pass


class UninitializedStatsError(RieszNetError, RuntimeError):
    """Batch norm used in eval mode before any running statistics exist."""


class CheckpointError(RieszNetError, IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, field, expected, found):
        super().__init__(f"config mismatch in field {field!r}: expected {expected!r}, found {found!r}")
        self.field = field


class UndefinedMeasureError(RieszNetError, ArithmeticError):
    pass


class TrainingDiverged(NumericError):
    pass


class ConfigError(RieszNetError, ValueError):
    pass
