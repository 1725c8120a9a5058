"""Content-adaptive super-resolution with routed SR branches."""

import logging
from typing import Optional

from ._version import __version__  # noqa: F401
from .config import RunConfig, load_config  # noqa: F401
from .exceptions import (  # noqa: F401
    CheckpointError,
    ClassSRException,
    ClassSRValueError,
    ConfigError,
    DatasetError,
    ExtraPackageError,
    FileTypeError,
    GradientError,
    GridError,
    NonFiniteError,
    ProbabilityError,
    ShapeError,
    TrainingError,
)
from .pipeline import Pipeline  # noqa: F401

STREAM_HANDLER_NAME = "classsr-stream"


def set_stream_logger(
    name: str = __name__, level: int = logging.INFO, format_string: Optional[str] = None
) -> None:
    """Add a stream handler for the given name and level to the logging module.

    A handler added by an earlier call for the same name is replaced.
    """
    if format_string is None:
        format_string = "%(asctime)s %(name)s [%(levelname)s] %(message)s"

    logger = logging.getLogger(name)
    logger.setLevel(level)
    for old in [h for h in logger.handlers if h.get_name() == STREAM_HANDLER_NAME]:
        logger.removeHandler(old)
    handler = logging.StreamHandler()
    handler.set_name(STREAM_HANDLER_NAME)
    handler.setLevel(level)
    formatter = logging.Formatter(format_string)
    handler.setFormatter(formatter)
    logger.addHandler(handler)


logging.getLogger(__name__).addHandler(logging.NullHandler())
