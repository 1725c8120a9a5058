"""Test-time routing: classify tiles, run one branch per tile, recombine."""

import json
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ClassSRValueError, GridError, ShapeError
from .imaging import (
    OverlayPalette,
    TileGrid,
    as_image,
    bicubic_resize,
    decompose,
    from_batch,
    psnr,
    recombine,
    to_batch,
)
from .losses import check_probabilities
from .models import ClassModule, SrContainer, flops
from .tensor import Tensor, no_grad
from .utils import round_percentages

logger = getLogger(__name__)


def route(probs: Sequence[float]) -> int:
    """Return the index of the largest probability, preferring the lower index.

    Raises:
        ProbabilityError: Invalid distribution.
    """
    probs = np.asarray(probs, dtype=np.float64)
    check_probabilities(probs)
    if probs.ndim != 1:
        raise ShapeError(f"route expects one probability vector: {probs.shape}")
    return int(np.argmax(probs))


def route_batch(probs: np.ndarray) -> np.ndarray:
    """Row-wise :func:`route` for a (B, M) array."""
    probs = np.asarray(probs, dtype=np.float64)
    check_probabilities(probs)
    return np.argmax(probs.reshape(-1, probs.shape[-1]), axis=1)


@dataclass
class CostTable:
    """Per-tile FLOPs of each branch and of the Class-Module."""

    branch_flops: List[float]
    class_flops: float

    @property
    def base_flops(self) -> float:
        return self.branch_flops[-1]

    @classmethod
    def from_models(
        cls, container: SrContainer, class_module: ClassModule
    ) -> "CostTable":
        return cls(
            branch_flops=[float(f) for f in container.branch_flops],
            class_flops=float(flops(class_module, container.tile_shape)),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CostTable":
        """Read ``{"branch_flops": [...], "class_flops": ...}`` from JSON.

        Raises:
            ClassSRValueError: Missing keys or negative costs.
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            table = cls(
                branch_flops=[float(f) for f in data["branch_flops"]],
                class_flops=float(data["class_flops"]),
            )
        except (KeyError, TypeError) as e:
            raise ClassSRValueError(f"Invalid cost table {path}: {e}")
        if min(table.branch_flops + [table.class_flops]) < 0:
            raise ClassSRValueError(f"Cost table {path} has negative costs.")
        return table


@dataclass
class TileRoute:
    origin: Tuple[int, int]
    class_index: int
    branch_flops: float


@dataclass
class RoutingReport:
    """Per-tile routing decisions of one image.

    Attributes:
        per_tile: Decisions in grid order.
        classes: Number of branches M.
        class_flops: Class-Module FLOPs charged once per tile.
        grid: The tile grid the decisions refer to.
        psnr: PSNR against ground truth, if one was given.
    """

    per_tile: List[TileRoute]
    classes: int
    class_flops: float
    grid: Optional[TileGrid] = None
    psnr: Optional[float] = None
    probabilities: List[List[float]] = field(default_factory=list)

    @property
    def tiles_total(self) -> int:
        return len(self.per_tile)

    @property
    def counts(self) -> List[int]:
        counts = [0] * self.classes
        for tile in self.per_tile:
            counts[tile.class_index] += 1
        return counts

    @property
    def histogram(self) -> List[float]:
        total = self.tiles_total
        return [c / total if total else 0.0 for c in self.counts]

    @property
    def avg_flops(self) -> float:
        if not self.per_tile:
            return 0.0
        branch = float(np.mean([t.branch_flops for t in self.per_tile]))
        return branch + self.class_flops

    @property
    def percentages(self) -> List[float]:
        return round_percentages(self.histogram, decimals=1)

    def to_dict(self) -> dict:
        return {
            "tiles_total": self.tiles_total,
            "counts": self.counts,
            "histogram": self.histogram,
            "percentages": self.percentages,
            "avg_flops": self.avg_flops,
            "class_flops": self.class_flops,
            "psnr": self.psnr,
            "grid": self.grid.to_dict() if self.grid else None,
            "per_tile": [
                {
                    "origin": list(t.origin),
                    "class_index": t.class_index,
                    "branch_flops": t.branch_flops,
                }
                for t in self.per_tile
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def classify_tiles(
    class_module: ClassModule, batch: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Return (N, M) Class-Module probabilities for an NCHW batch."""
    probs = []
    with no_grad():
        for start in range(0, len(batch), batch_size):
            probs.append(class_module(Tensor(batch[start : start + batch_size])).data)
    return np.concatenate(probs, axis=0)


def run_routed(
    container: SrContainer,
    batch: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Run each tile through the branch named by its label, exactly once.

    Raises:
        ClassSRValueError: A label is out of range.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(batch):
        raise ShapeError(f"{len(labels)} labels for {len(batch)} tiles.")
    if len(labels) and (labels.min() < 0 or labels.max() >= len(container)):
        raise ClassSRValueError(f"Branch labels must be in [0, {len(container)}).")
    out: Optional[np.ndarray] = None
    with no_grad():
        for j in range(len(container)):
            indices = np.flatnonzero(labels == j)
            for start in range(0, len(indices), batch_size):
                chunk = indices[start : start + batch_size]
                sr = container.forward_branch(j, Tensor(batch[chunk])).data
                if out is None:
                    out = np.zeros((len(batch),) + sr.shape[1:], dtype=sr.dtype)
                out[chunk] = sr
    if out is None:
        raise ShapeError("Cannot route an empty batch.")
    return out


def super_resolve(
    img: np.ndarray,
    container: SrContainer,
    class_module: ClassModule,
    tile: int = 32,
    stride: int = 28,
    scale: int = 4,
    force_branch: Optional[int] = None,
    labels: Optional[Sequence[int]] = None,
    hr: Optional[np.ndarray] = None,
    channel: str = "all",
) -> Tuple[np.ndarray, RoutingReport]:
    """Super-resolve an image tile by tile, one branch per tile.

    Args:
        img: LR image (H, W, C).
        container: SR branches.
        class_module: Tile classifier.
        tile: Tile side in LR pixels.
        stride: Tile stride in LR pixels.
        scale: SR factor of the branches.
        force_branch: Route every tile to this 0-based branch.
        labels: Route tile ``i`` to branch ``labels[i]``.
        hr: Ground truth for the PSNR of the report.
        channel: PSNR channel policy.

    Returns:
        The SR image and its routing report.

    Raises:
        GridError: The image is smaller than a tile.
        ShapeError: The branches do not upscale by ``scale``.
    """
    tiles, grid = decompose(img, tile, stride)
    batch = to_batch(tiles)
    if force_branch is not None:
        if not 0 <= force_branch < len(container):
            raise ClassSRValueError(f"No branch {force_branch} to force.")
        routes = np.full(len(tiles), force_branch, dtype=np.int64)
        probs = np.eye(len(container))[routes]
    elif labels is not None:
        routes = np.asarray(labels, dtype=np.int64)
        if len(routes) != len(tiles):
            raise GridError(f"{len(routes)} labels for a grid of {len(tiles)} tiles.")
        probs = np.eye(len(container))[np.clip(routes, 0, len(container) - 1)]
    else:
        probs = classify_tiles(class_module, batch)
        routes = route_batch(probs)

    container.reset_counters()
    sr = run_routed(container, batch, routes)
    if sr.shape[2:] != (tile * scale, tile * scale):
        raise ShapeError(f"Branches produce {sr.shape[2:]} tiles, not scale {scale}.")
    output = np.clip(recombine(from_batch(sr), grid, scale), 0.0, 1.0)

    class_flops = float(flops(class_module, container.tile_shape))
    report = RoutingReport(
        per_tile=[
            TileRoute(origin, int(j), float(container.branch_flops[j]))
            for origin, j in zip(grid.origins, routes)
        ],
        classes=len(container),
        class_flops=class_flops,
        grid=grid,
        probabilities=np.asarray(probs, dtype=np.float64).tolist(),
    )
    if hr is not None:
        report.psnr = psnr(output, hr, channel)
    logger.debug(f"Routed {report.tiles_total} tiles: {report.counts}")
    return output, report


def flops_summary(
    report: RoutingReport,
    container: Optional[SrContainer] = None,
    class_module: Optional[ClassModule] = None,
    cost_table: Optional[CostTable] = None,
) -> Dict[str, float]:
    """Average per-tile FLOPs of a routing and its ratio to the base branch.

    ``cost_table`` replaces the counted costs of ``container`` and
    ``class_module`` when given.

    Raises:
        ClassSRValueError: Neither models nor a cost table are given.
    """
    if cost_table is None:
        if container is None or class_module is None:
            raise ClassSRValueError("flops_summary needs models or a cost table.")
        cost_table = CostTable.from_models(container, class_module)
    if len(cost_table.branch_flops) != report.classes:
        raise ClassSRValueError(
            f"Cost table has {len(cost_table.branch_flops)} branches, "
            f"report has {report.classes}."
        )
    branch = sum(h * c for h, c in zip(report.histogram, cost_table.branch_flops))
    avg = branch + cost_table.class_flops
    return {
        "avg_flops": avg,
        "base_flops": cost_table.base_flops,
        "class_flops": cost_table.class_flops,
        "ratio_vs_base": avg / cost_table.base_flops,
    }


def class_map_overlay(
    report: RoutingReport,
    img: np.ndarray,
    scale: int,
    palette: Optional[OverlayPalette] = None,
) -> np.ndarray:
    """Tint the bicubic-upscaled input by the class of each tile.

    Overlapping tiles average their tints.

    Raises:
        GridError: The report's grid does not match the image.
    """
    palette = palette or OverlayPalette()
    img = as_image(img)
    grid = report.grid
    if grid is None or tuple(grid.image_dims) != img.shape[:2]:
        raise GridError("The routing report does not describe this image.")
    if len(grid.origins) != report.tiles_total:
        raise GridError("The routing report does not match its grid.")
    height, width = img.shape[0] * scale, img.shape[1] * scale
    base = bicubic_resize(img, height, width)
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)

    tint = np.zeros((height, width, 3), dtype=np.float64)
    count = np.zeros((height, width, 1), dtype=np.float64)
    size = grid.tile * scale
    for route_ in report.per_tile:
        r, c = route_.origin[0] * scale, route_.origin[1] * scale
        tint[r : r + size, c : c + size] += palette.color(
            route_.class_index, report.classes
        )
        count[r : r + size, c : c + size] += 1
    tint /= np.maximum(count, 1)
    overlay = (1 - palette.alpha) * base + palette.alpha * tint
    return np.clip(overlay, 0.0, 1.0).astype(np.float32)
