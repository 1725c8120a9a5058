from pathlib import Path
from typing import Union

import cv2
import numpy as np

from .utils import check_image_path


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read the image from the file in numpy format.

    Args:
        path: The path to the PNG file to be read.

    Returns:
        Image data of shape (Height, Width, Channel) with float32 values in
        [0, 1]. The color model is RGB; grayscale files have one channel.

    Raises:
        FileTypeError: The file is not a PNG.
        FileNotFoundError: No such file or it cannot be decoded.
    """
    path = check_image_path(Path(path))
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FileNotFoundError(f"Could not read image: {path}")
    if image.ndim == 2:
        image = image[:, :, None]
    elif image.shape[2] == 4:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2RGB)
    else:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    scale = 65535.0 if image.dtype == np.uint16 else 255.0
    return (image.astype(np.float32) / scale).astype(np.float32)


def write_image(path: Union[str, Path], image: np.ndarray) -> Path:
    """Write an image in [0, 1] as an 8-bit PNG, rounding half up.

    Raises:
        FileTypeError: The file is not a PNG.
    """
    path = check_image_path(Path(path))
    data = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    elif data.ndim == 3:
        data = data[:, :, 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), data)
    return path
