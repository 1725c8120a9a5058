"""Training corpus construction: HR/LR pairs, tiles, difficulty and classes."""

import csv
import json
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .exceptions import ConfigError, DatasetError, ShapeError
from .imaging import (
    AUGMENT_OPS,
    as_image,
    augment,
    bicubic_resize,
    from_batch,
    make_grid,
    psnr,
    to_batch,
)
from .utils import import_image_io

logger = getLogger(__name__)

Pair = Tuple[np.ndarray, np.ndarray]
Reference = Callable[[np.ndarray], np.ndarray]

SYNTH_KINDS = ["flat", "texture", "edge"]
MANIFEST_FILE = "manifest.json"
PACKED_FILE = "tiles.csr"
STORAGE_TYPES = ["packed", "png"]


@dataclass
class TileSample:
    """An aligned LR/HR tile pair with its difficulty and class.

    Attributes:
        lr: LR tile (tile, tile, C).
        hr: HR tile (tile * scale, tile * scale, C).
        difficulty_psnr: PSNR of the reference restoration, if scored.
        class_label: 0 (simple) to M - 1 (hard), if partitioned.
        source: Name of the source image.
        origin: LR origin of the tile in its source LR image.
        kind: Population of a synthetic source ("flat", "texture", "edge").
    """

    lr: np.ndarray
    hr: np.ndarray
    difficulty_psnr: Optional[float] = None
    class_label: Optional[int] = None
    source: str = ""
    origin: Tuple[int, int] = (0, 0)
    kind: str = ""

    def __post_init__(self):
        lr_h, lr_w, lr_c = self.lr.shape
        hr_h, hr_w, hr_c = self.hr.shape
        if lr_c != hr_c or hr_h % lr_h or hr_w % lr_w or hr_h // lr_h != hr_w // lr_w:
            raise ShapeError(
                f"HR tile {self.hr.shape} is not a scaled LR tile {self.lr.shape}."
            )

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]

    def describe(self) -> dict:
        return {
            "source": self.source,
            "origin": list(self.origin),
            "kind": self.kind,
            "psnr": self.difficulty_psnr,
            "label": self.class_label,
        }


def prepare_pairs(
    images: Sequence[np.ndarray], hr_scales: Sequence[float], sr_scale: int
) -> List[Pair]:
    """Make (HR, LR) pairs from every image at every HR scale.

    The rescaled HR image is trimmed to a multiple of ``sr_scale`` and
    bicubic-downsampled by ``sr_scale`` to give the LR image.

    Args:
        images: Source images.
        hr_scales: Factors in (0, 1] applied to the source to obtain HR images.
        sr_scale: SR factor.

    Returns:
        Pairs in image-major, scale-minor order.

    Raises:
        ConfigError: A scale is outside (0, 1] or sr_scale < 1.
        DatasetError: A rescaled image is smaller than ``sr_scale``.
    """
    if sr_scale < 1:
        raise ConfigError(f"The SR scale must be >= 1: {sr_scale}")
    if not hr_scales or any(not 0 < s <= 1 for s in hr_scales):
        raise ConfigError(f"HR scales must be in (0, 1]: {list(hr_scales)}")

    pairs = []
    for image in images:
        image = as_image(image)
        height, width, _ = image.shape
        for scale in hr_scales:
            out_h = int(round(height * scale)) // sr_scale * sr_scale
            out_w = int(round(width * scale)) // sr_scale * sr_scale
            if out_h < sr_scale or out_w < sr_scale:
                raise DatasetError(
                    f"Image {height}x{width} is too small at scale {scale}."
                )
            scaled_h, scaled_w = int(round(height * scale)), int(round(width * scale))
            hr = bicubic_resize(image, scaled_h, scaled_w)[:out_h, :out_w]
            lr = bicubic_resize(hr, out_h // sr_scale, out_w // sr_scale)
            pairs.append((hr, lr))
    return pairs


def extract_tiles(
    pairs: Sequence[Pair],
    tile: int = 32,
    stride: int = 16,
    sources: Optional[Sequence[str]] = None,
    kinds: Optional[Sequence[str]] = None,
) -> List[TileSample]:
    """Crop aligned tiles from every pair.

    The LR tile at ``origin`` pairs with the HR tile at ``origin * scale`` of
    size ``tile * scale``.

    Raises:
        GridError: A pair is smaller than a tile or the stride is invalid.
    """
    samples = []
    for index, (hr, lr) in enumerate(pairs):
        scale = hr.shape[0] // lr.shape[0]
        grid = make_grid(lr.shape[0], lr.shape[1], tile, stride)
        size = tile * scale
        for r, c in grid.origins:
            samples.append(
                TileSample(
                    lr=lr[r : r + tile, c : c + tile].copy(),
                    hr=hr[
                        r * scale : r * scale + size, c * scale : c * scale + size
                    ].copy(),
                    source=sources[index] if sources else f"pair{index:04d}",
                    origin=(r, c),
                    kind=kinds[index] if kinds else "",
                )
            )
    return samples


def bicubic_reference(scale: int) -> Reference:
    """Return a scorer that restores NCHW LR tiles by bicubic upsampling."""

    def reference(batch: np.ndarray) -> np.ndarray:
        images = from_batch(batch)
        return to_batch(
            [
                bicubic_resize(im, im.shape[0] * scale, im.shape[1] * scale)
                for im in images
            ]
        )

    return reference


def score_difficulty(
    samples: Sequence[TileSample],
    reference: Reference,
    channel: str = "all",
    batch_size: int = 64,
) -> List[TileSample]:
    """Set ``difficulty_psnr`` to the PSNR of the reference restoration.

    Args:
        samples: Tiles to score; they are updated in place.
        reference: Maps an NCHW LR batch to an NCHW SR batch.
        channel: PSNR channel policy.
        batch_size: Tiles per reference call.

    Raises:
        ShapeError: The reference output does not match the HR tiles.
    """
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        sr = np.asarray(reference(to_batch([s.lr for s in chunk])))
        expected = (len(chunk),) + chunk[0].hr.shape[2:] + chunk[0].hr.shape[:2]
        if sr.shape != expected:
            raise ShapeError(f"Reference produced {sr.shape}, expected {expected}.")
        for sample, out in zip(chunk, from_batch(sr)):
            sample.difficulty_psnr = psnr(np.clip(out, 0, 1), sample.hr, channel)
    return list(samples)


def class_sizes(total: int, classes: int) -> List[int]:
    """Equal class sizes with the remainder given to the easiest classes."""
    base, remainder = divmod(total, classes)
    return [base + (1 if i < remainder else 0) for i in range(classes)]


def partition_classes(samples: Sequence[TileSample], classes: int) -> List[TileSample]:
    """Label samples by difficulty rank into ``classes`` equal groups.

    Samples are sorted by PSNR descending, ties by position; label 0 is the
    simplest group.

    Raises:
        ConfigError: Fewer than two classes.
        DatasetError: An unscored sample.
    """
    if classes < 2:
        raise ConfigError(f"Need at least two classes: {classes}")
    if any(s.difficulty_psnr is None for s in samples):
        raise DatasetError("Every sample must be scored before partitioning.")
    order = sorted(range(len(samples)), key=lambda i: (-samples[i].difficulty_psnr, i))
    position = 0
    for label, size in enumerate(class_sizes(len(samples), classes)):
        for i in order[position : position + size]:
            samples[i].class_label = label
        position += size
    return list(samples)


def class_counts(samples: Sequence[TileSample], classes: int) -> List[int]:
    counts = [0] * classes
    for sample in samples:
        if sample.class_label is not None:
            counts[sample.class_label] += 1
    return counts


@dataclass
class SynthSpec:
    """Counts and seed of the synthetic corpus.

    Attributes:
        n_flat: Smooth low-frequency gradient images.
        n_texture: Band-limited noise texture images.
        n_edge: Polygon and checkerboard images.
        seed: Base seed; image ``i`` uses ``(seed, i)``.
        size: Side of the square images.
    """

    n_flat: int = 10
    n_texture: int = 10
    n_edge: int = 0
    seed: int = 0
    size: int = 256

    def validate(self) -> None:
        if min(self.n_flat, self.n_texture, self.n_edge) < 0:
            raise ConfigError("Synthetic image counts must be >= 0.")
        if self.size < 8:
            raise ConfigError(f"Synthetic image size is too small: {self.size}")


def synth_kinds(spec: SynthSpec) -> List[str]:
    """Kinds of the synthetic images, each kind spread evenly over the corpus.

    Position ``i`` takes the kind furthest behind its share ``count * (i + 1) /
    total``; ties go to the earlier kind of ``SYNTH_KINDS``. Any trailing run of
    images, such as the held-out split, then mixes the kinds in proportion.
    """
    counts = {"flat": spec.n_flat, "texture": spec.n_texture, "edge": spec.n_edge}
    total = sum(counts.values())
    emitted = dict.fromkeys(SYNTH_KINDS, 0)
    kinds = []
    for i in range(total):
        open_kinds = [k for k in SYNTH_KINDS if emitted[k] < counts[k]]
        kind = max(open_kinds, key=lambda k: counts[k] * (i + 1) - emitted[k] * total)
        emitted[kind] += 1
        kinds.append(kind)
    return kinds


def _flat_image(rng: np.random.Generator, size: int) -> np.ndarray:
    axis = np.linspace(0, 1, size)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    base = rng.uniform(0.3, 0.7, 3)
    slope = rng.uniform(-0.2, 0.2, (2, 3))
    phase = rng.uniform(0, 2 * np.pi, 3)
    wave = 0.05 * np.sin(np.pi * (xx + yy)[:, :, None] + phase)
    image = base + yy[:, :, None] * slope[0] + xx[:, :, None] * slope[1] + wave
    return image


def _texture_image(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.standard_normal((size, size, 3))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fy, fx)
    band = ((radius > 0.08) & (radius < 0.45))[:, :, None]
    texture = np.real(np.fft.ifft2(np.fft.fft2(noise, axes=(0, 1)) * band, axes=(0, 1)))
    texture /= texture.std() + 1e-12
    return rng.uniform(0.4, 0.6, 3) + 0.15 * texture


def _edge_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    colors = rng.uniform(0.1, 0.9, (2, 3))
    if rng.random() < 0.5:
        cell = int(rng.integers(6, 17))
        mask = ((yy // cell + xx // cell) % 2).astype(bool)
        return np.where(mask[:, :, None], colors[0], colors[1])
    image = np.broadcast_to(colors[0], (size, size, 3)).copy()
    for _ in range(int(rng.integers(2, 5))):
        corners = rng.uniform(0, size, (3, 2))
        color = rng.uniform(0.1, 0.9, 3)
        signs = []
        for k in range(3):
            (y0, x0), (y1, x1) = corners[k], corners[(k + 1) % 3]
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        stacked = np.stack(signs)
        inside = np.all(stacked >= 0, axis=0) | np.all(stacked <= 0, axis=0)
        image[inside] = color
    return image


_GENERATORS = {"flat": _flat_image, "texture": _texture_image, "edge": _edge_image}


def synth_corpus(spec: SynthSpec) -> List[np.ndarray]:
    """Generate a deterministic corpus of smooth, textured and edge images.

    Raises:
        ConfigError: Negative counts.
    """
    spec.validate()
    images = []
    for index, kind in enumerate(synth_kinds(spec)):
        rng = np.random.default_rng([spec.seed, index])
        image = _GENERATORS[kind](rng, spec.size)
        images.append(np.clip(image, 0.0, 1.0).astype(np.float32))
    logger.debug(f"Generated {len(images)} synthetic images.")
    return images


def sample_batch(
    samples: Sequence[TileSample],
    batch_size: int,
    rng: np.random.Generator,
    augment_tiles: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a uniform batch and apply the same random flip or rotation per pair.

    Returns:
        NCHW LR and HR arrays.

    Raises:
        DatasetError: No samples.
    """
    if not samples:
        raise DatasetError("Cannot sample a batch from an empty set.")
    picks = rng.integers(0, len(samples), batch_size)
    ops = rng.integers(0, len(AUGMENT_OPS), batch_size)
    lrs, hrs = [], []
    for i, op in zip(picks, ops):
        name = AUGMENT_OPS[op] if augment_tiles else "identity"
        lrs.append(augment(samples[i].lr, name))
        hrs.append(augment(samples[i].hr, name))
    return to_batch(lrs), to_batch(hrs)


@dataclass
class Manifest:
    """Scored and partitioned tiles with their provenance.

    Attributes:
        samples: The tiles.
        classes: Number of classes M.
        provenance: Sources, scales, strides and seed used to build the tiles.
    """

    samples: List[TileSample]
    classes: int = 3
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def counts(self) -> List[int]:
        return class_counts(self.samples, self.classes)

    def of_class(self, label: int) -> List[TileSample]:
        return [s for s in self.samples if s.class_label == label]

    def to_dict(self) -> dict:
        return {
            "M": self.classes,
            "counts": self.counts,
            "provenance": self.provenance,
            "samples": [s.describe() for s in self.samples],
        }

    def save(self, directory: Union[str, Path], storage: str = "packed") -> Path:
        """Write ``manifest.json`` and the tiles to ``directory``.

        Args:
            directory: Output directory.
            storage: "packed" for one CSR1 file or "png" for one file per tile.

        Raises:
            ConfigError: Unknown storage type.
        """
        if storage not in STORAGE_TYPES:
            raise ConfigError(f"Unknown tile storage: {storage}")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        data["storage"] = storage
        if storage == "packed":
            arrays = {
                "lr": np.stack([s.lr for s in self.samples]),
                "hr": np.stack([s.hr for s in self.samples]),
            }
            save_arrays(directory / PACKED_FILE, arrays)
        else:
            image_io = import_image_io()
            for i, sample in enumerate(self.samples):
                image_io.write_image(directory / "tiles" / f"{i:06d}_lr.png", sample.lr)
                image_io.write_image(directory / "tiles" / f"{i:06d}_hr.png", sample.hr)
        path = directory / MANIFEST_FILE
        path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
        logger.info(f"Wrote manifest of {len(self)} tiles to {directory}.")
        return path

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "Manifest":
        """Read a manifest written by :meth:`save`.

        Raises:
            DatasetError: The manifest is missing or inconsistent.
        """
        directory = Path(directory)
        path = directory / MANIFEST_FILE
        if not path.exists():
            raise DatasetError(f"No manifest at {path}.")
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("storage", "packed") == "packed":
            arrays, _ = load_arrays(directory / PACKED_FILE)
            lrs, hrs = list(arrays["lr"]), list(arrays["hr"])
        else:
            image_io = import_image_io()
            count = len(data["samples"])
            tiles = directory / "tiles"
            lrs = [image_io.read_image(tiles / f"{i:06d}_lr.png") for i in range(count)]
            hrs = [image_io.read_image(tiles / f"{i:06d}_hr.png") for i in range(count)]
        if len(lrs) != len(data["samples"]):
            raise DatasetError(
                f"{path} lists {len(data['samples'])} tiles, found {len(lrs)}."
            )
        samples = [
            TileSample(
                lr=lr,
                hr=hr,
                difficulty_psnr=meta["psnr"],
                class_label=meta["label"],
                source=meta["source"],
                origin=(int(meta["origin"][0]), int(meta["origin"][1])),
                kind=meta["kind"],
            )
            for lr, hr, meta in zip(lrs, hrs, data["samples"])
        ]
        return cls(
            samples=samples, classes=int(data["M"]), provenance=data["provenance"]
        )


def build_manifest(
    images: Sequence[np.ndarray],
    sources: Sequence[str],
    classes: int,
    make_reference: Callable[[Sequence[TileSample]], Reference],
    hr_scales: Sequence[float] = (1.0,),
    sr_scale: int = 4,
    tile: int = 32,
    stride: int = 16,
    kinds: Optional[Sequence[str]] = None,
    channel: str = "all",
    provenance: Optional[Dict[str, Any]] = None,
) -> Manifest:
    """Prepare pairs, crop tiles, score and partition them.

    The difficulty reference is built by ``make_reference`` from the extracted
    tiles. Images too small for one LR tile at some HR scale are skipped with a
    warning.

    Raises:
        DatasetError: No tile could be extracted.
    """
    kinds = list(kinds) if kinds else [""] * len(images)
    samples: List[TileSample] = []
    for image, source, kind in zip(images, sources, kinds):
        height, width = as_image(image).shape[:2]
        scales = [
            s
            for s in hr_scales
            if min(int(round(height * s)), int(round(width * s))) // sr_scale >= tile
        ]
        if len(scales) < len(hr_scales):
            logger.warning(f"Skipping undersized {source} at some HR scales.")
        if not scales:
            continue
        pairs = prepare_pairs([image], scales, sr_scale)
        samples += extract_tiles(
            pairs,
            tile,
            stride,
            sources=[source] * len(pairs),
            kinds=[kind] * len(pairs),
        )
    if not samples:
        raise DatasetError("The corpus yields no tiles.")
    score_difficulty(samples, make_reference(samples), channel=channel)
    partition_classes(samples, classes)
    manifest = Manifest(
        samples=samples, classes=classes, provenance=dict(provenance or {})
    )
    manifest.provenance.update(
        {
            "sources": list(sources),
            "hr_scales": list(hr_scales),
            "scale": sr_scale,
            "tile": tile,
            "stride": stride,
        }
    )
    logger.info(f"Built {len(samples)} tiles with class counts {manifest.counts}.")
    return manifest


def write_difficulty_curve(
    path: Union[str, Path], samples: Sequence[TileSample]
) -> Path:
    """Write the PSNR-sorted difficulty curve with class labels as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ranked = sorted(enumerate(samples), key=lambda p: (-p[1].difficulty_psnr, p[0]))
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["rank", "psnr", "label", "source", "kind"])
        for rank, (_, sample) in enumerate(ranked):
            writer.writerow(
                [
                    rank,
                    f"{sample.difficulty_psnr:.4f}",
                    sample.class_label,
                    sample.source,
                    sample.kind,
                ]
            )
    return path
