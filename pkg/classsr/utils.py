import hashlib
import inspect
from functools import wraps
from pathlib import Path

from .exceptions import ConfigError, ExtraPackageError, FileTypeError

IMAGE_SUFFIXES = [".png"]
AVAILABLE_STAGES = ["pretrain", "classifier", "joint", "baseline"]


def create_digest(path: Path) -> str:
    """Create a SHA-256 hex digest from file."""
    with path.open("rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def check_image_path(path: Path) -> Path:
    """Check that the path names a PNG image."""
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        message = (
            f"The extension of the file {path} must be "
            f"{', '.join(IMAGE_SUFFIXES)}."
        )
        raise FileTypeError(message)
    return path


def check_stage(func):
    """Check available training stage."""

    @wraps(func)
    def wrapper(*args, **kwargs):
        sig = inspect.signature(func)
        args_value = sig.bind(*args, **kwargs)
        stage = args_value.arguments["stage"]

        if stage not in AVAILABLE_STAGES:
            raise ConfigError(f"Unavailable stage: {stage}")

        return func(*args, **kwargs)

    return wrapper


def round_percentages(fractions, decimals: int = 1) -> list:
    """Round fractions to percentages that sum exactly to 100.

    Uses the largest remainder method on units of ``10 ** -decimals`` percent.
    """
    unit = 10 ** decimals
    total_units = 100 * unit
    raw = [f * total_units for f in fractions]
    floors = [int(r) for r in raw]
    if sum(fractions) <= 0:
        return [0.0 for _ in fractions]
    missing = total_units - sum(floors)
    order = sorted(range(len(raw)), key=lambda i: (floors[i] - raw[i], i))
    for i in order[: max(0, missing)]:
        floors[i] += 1
    return [f / unit for f in floors]


def import_image_io():
    """Import the PNG reader and writer of the cv extra.

    Raises:
        ExtraPackageError: opencv-python is not installed.
    """
    try:
        from . import extras
    except ImportError:
        raise ExtraPackageError(
            "The extras package is not installed. "
            "Install as follows: pip install classsr[cv]"
        )
    return extras
