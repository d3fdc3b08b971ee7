"""Exception hierarchy shared by all sonarmatch modules."""


class SonarMatchError(Exception):
    """Base class for every error raised by this package."""


class InvalidColorspaceError(SonarMatchError, ValueError):
    pass


class DimensionMismatchError(SonarMatchError, ValueError):
    pass


class OutOfBoundsError(SonarMatchError, ValueError):
    pass


class ImageTooSmallError(SonarMatchError, ValueError):
    pass


class DegenerateStyleError(SonarMatchError, ValueError):
    pass


class OptimizationDivergedError(SonarMatchError, RuntimeError):
    pass


class TrainingDivergedError(SonarMatchError, RuntimeError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class UnknownLayerError(SonarMatchError, KeyError):
    pass


class InsufficientDataError(SonarMatchError, ValueError):
    pass


class InsufficientLocationsError(SonarMatchError, ValueError):
    pass


class ContractViolation(SonarMatchError, ValueError):
    pass


class WeightFormatError(SonarMatchError, ValueError):
    """Malformed descriptor weight file."""


class BadMagicError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class WeightShapeError(WeightFormatError, DimensionMismatchError):
    def __init__(self, tensor, expected, found):
        self.tensor = tensor
        super().__init__(f"tensor {tensor!r}: expected shape {tuple(expected)}, found {tuple(found)}")


class ConfigError(SonarMatchError, ValueError):
    pass


class StageError(SonarMatchError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
