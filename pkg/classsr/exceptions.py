class ClassSRException(Exception):
    """Base class for exceptions in the ClassSR package."""


class ClassSRValueError(ClassSRException):
    """Raised for invalid value."""


class ShapeError(ClassSRValueError):
    """Raised when tensor or image shapes do not agree."""


class ProbabilityError(ClassSRValueError):
    """Raised when a probability vector is not a valid distribution."""


class ConfigError(ClassSRValueError):
    """Raised for an invalid or unknown configuration value."""


class GridError(ClassSRValueError):
    """Raised when an image cannot be tiled or a tile grid is inconsistent."""


class NonFiniteError(ClassSRException):
    """Raised when NaN or Inf appears in a forward or backward pass."""


class GradientError(ClassSRException):
    """Raised when backpropagation cannot be performed."""


class FileTypeError(ClassSRException):
    """Raised when trying to use an unallowable file type."""


class CheckpointError(ClassSRException):
    """Raised when a checkpoint file is invalid."""


class DatasetError(ClassSRException):
    """Raised when a corpus or manifest cannot be used."""


class TrainingError(ClassSRException):
    """Raised when a training stage cannot run."""


class ExtraPackageError(ClassSRException):
    """Raised when no extra packages are installed."""
