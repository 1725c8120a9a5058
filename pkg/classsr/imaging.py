"""Image plumbing: resampling, tiling, PSNR and augmentation.

Images are float32 numpy arrays of shape (H, W, C) with values in [0, 1].
"""

import json
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import ClassSRValueError, GridError, ShapeError

PSNR_CAP = 100.0
AUGMENT_OPS = ["identity", "hflip", "rot90", "rot180", "rot270"]
PSNR_CHANNELS = ["all", "luma"]


def as_image(array: np.ndarray) -> np.ndarray:
    """Return ``array`` as a float32 (H, W, C) image."""
    image = np.asarray(array, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ShapeError(f"Expected an (H, W, 1|3) image, got {image.shape}.")
    return image


def to_batch(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack (H, W, C) images into an NCHW array."""
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))


def from_batch(batch: np.ndarray) -> List[np.ndarray]:
    """Split an NCHW array into (H, W, C) images."""
    return [np.ascontiguousarray(b.transpose(1, 2, 0)) for b in batch]


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (Catmull-Rom for a = -0.5)."""
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """Return the (out_size, in_size) bicubic interpolation matrix.

    When shrinking, the kernel is widened by the inverse scale so that it also
    acts as the low-pass filter. Indices beyond the border are clamped.
    """
    scale = out_size / in_size
    kernel_scale = min(scale, 1.0)
    support = 2.0 / kernel_scale
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) / scale - 0.5
    taps = int(math.ceil(support)) * 2 + 1
    left = np.floor(centers - support).astype(np.int64) + 1
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = _cubic((centers[:, None] - indices) * kernel_scale) * kernel_scale
    weights /= weights.sum(axis=1, keepdims=True)

    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    clamped = np.clip(indices, 0, in_size - 1)
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(matrix, (rows, clamped.reshape(-1)), weights.reshape(-1))
    return matrix


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with the Catmull-Rom cubic kernel, edge-clamped, clipped to [0, 1].

    Raises:
        ClassSRValueError: The output size is zero.
    """
    image = as_image(image)
    if out_h < 1 or out_w < 1:
        raise ClassSRValueError(f"Output size must be positive: {out_h}x{out_w}")
    height, width, _ = image.shape
    if (out_h, out_w) == (height, width):
        return image.copy()
    rows = _resize_weights(height, out_h)
    cols = _resize_weights(width, out_w)
    out = np.einsum("oh,hwc,pw->opc", rows, image.astype(np.float64), cols)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class TileGrid:
    """Tile origins (in LR pixels) describing a decomposition of an image."""

    origins: List[Tuple[int, int]]
    tile: int = 32
    stride: int = 28
    image_dims: Tuple[int, int] = (0, 0)

    def __len__(self):
        return len(self.origins)

    def to_dict(self) -> dict:
        return {
            "origins": [list(o) for o in self.origins],
            "tile": self.tile,
            "stride": self.stride,
            "dims": list(self.image_dims),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TileGrid":
        return cls(
            origins=[(int(r), int(c)) for r, c in data["origins"]],
            tile=int(data["tile"]),
            stride=int(data["stride"]),
            image_dims=(int(data["dims"][0]), int(data["dims"][1])),
        )

    def coverage(self) -> np.ndarray:
        """Return the per-pixel count of tiles covering the image."""
        count = np.zeros(self.image_dims, dtype=np.int64)
        for r, c in self.origins:
            count[r : r + self.tile, c : c + self.tile] += 1
        return count


def _axis_origins(size: int, tile: int, stride: int) -> List[int]:
    origins = list(range(0, size - tile + 1, stride))
    if origins[-1] + tile < size:
        origins.append(size - tile)
    return origins


def make_grid(height: int, width: int, tile: int, stride: int) -> TileGrid:
    """Build the row-major tile grid of an image.

    Raises:
        GridError: The image is smaller than a tile or the stride is invalid.
    """
    if not 1 <= stride <= tile:
        raise GridError(f"Stride must be in [1, {tile}]: {stride}")
    if height < tile or width < tile:
        raise GridError(f"Image {height}x{width} is smaller than the tile {tile}.")
    rows = _axis_origins(height, tile, stride)
    cols = _axis_origins(width, tile, stride)
    origins = [(r, c) for r in rows for c in cols]
    return TileGrid(
        origins=origins, tile=tile, stride=stride, image_dims=(height, width)
    )


def decompose(
    image: np.ndarray, tile: int = 32, stride: int = 28
) -> Tuple[List[np.ndarray], TileGrid]:
    """Cut an image into overlapping tiles.

    A last origin snapped to ``dim - tile`` is appended on an axis when the
    regular origins leave pixels uncovered.

    Raises:
        GridError: The image is smaller than a tile or the stride is invalid.
    """
    image = as_image(image)
    grid = make_grid(image.shape[0], image.shape[1], tile, stride)
    tiles = [image[r : r + tile, c : c + tile].copy() for r, c in grid.origins]
    return tiles, grid


def recombine(
    sr_tiles: Sequence[np.ndarray], grid: TileGrid, scale: int
) -> np.ndarray:
    """Combine SR tiles by averaging overlapping areas.

    Raises:
        GridError: The tile count or tile size does not match the grid.
    """
    if len(sr_tiles) != len(grid.origins):
        raise GridError(
            f"{len(sr_tiles)} tiles do not match a grid of {len(grid.origins)}."
        )
    size = grid.tile * scale
    height, width = grid.image_dims
    channels = as_image(sr_tiles[0]).shape[2] if sr_tiles else 1
    total = np.zeros((height * scale, width * scale, channels), dtype=np.float64)
    count = np.zeros((height * scale, width * scale, 1), dtype=np.float64)
    for tile, (r, c) in zip(sr_tiles, grid.origins):
        tile = as_image(tile)
        if tile.shape != (size, size, channels):
            raise GridError(f"SR tile {tile.shape} does not match {size}x{size}.")
        r, c = r * scale, c * scale
        total[r : r + size, c : c + size] += tile
        count[r : r + size, c : c + size] += 1
    if np.any(count == 0):
        raise GridError("The grid leaves pixels uncovered.")
    return (total / count).astype(np.float32)


def _luma(image: np.ndarray) -> np.ndarray:
    if image.shape[2] == 1:
        return image
    weights = np.array([65.481, 128.553, 24.966]) / 255.0
    return (image @ weights + 16.0 / 255.0)[:, :, None]


def psnr(a: np.ndarray, b: np.ndarray, channel: str = "all") -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] scale.

    Identical images return the 100 dB cap.

    Args:
        a: An image.
        b: An image with the same dimensions.
        channel: "all" for every channel jointly or "luma" for the Y channel.

    Raises:
        ShapeError: Dimension mismatch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Cannot compare images of shapes {a.shape} and {b.shape}.")
    if channel not in PSNR_CHANNELS:
        raise ClassSRValueError(f"Unknown PSNR channel policy: {channel}")
    if channel == "luma":
        a, b = _luma(as_image(a)), _luma(as_image(b))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def augment(image: np.ndarray, op: str) -> np.ndarray:
    """Apply a lossless flip or rotation.

    Raises:
        ClassSRValueError: Unknown op tag.
    """
    if op == "identity":
        return image.copy()
    if op == "hflip":
        return np.ascontiguousarray(image[:, ::-1])
    if op in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
        return np.ascontiguousarray(np.rot90(image, k=k, axes=(0, 1)))
    raise ClassSRValueError(f"Unknown augmentation: {op}")


@dataclass
class OverlayPalette:
    """Tint colors for the class map, from the simplest class to the hardest."""

    simple: Tuple[float, float, float] = (0.56, 0.93, 0.56)
    hard: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    alpha: float = 0.5

    def color(self, class_index: int, classes: int) -> np.ndarray:
        t = class_index / max(classes - 1, 1)
        simple = np.array(self.simple)
        hard = np.array(self.hard)
        return (1 - t) * simple + t * hard
