"""SR branches, the Class-Module, the SR container and FLOPs accounting."""

import json
from dataclasses import asdict, dataclass, field
from logging import getLogger
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ClassSRValueError, ConfigError, ShapeError
from .layers import (
    Conv2d,
    ConvTranspose2d,
    GlobalAvgPool,
    Linear,
    Module,
    PReLU,
    ReLU,
    Sequential,
    Shape,
    Softmax,
)
from .tensor import Tensor

logger = getLogger(__name__)

# Branch widths of the class-count ablation, cheapest branch first.
BRANCH_PRESETS: Dict[int, Tuple[int, ...]] = {
    2: (16, 56),
    3: (16, 36, 56),
    4: (16, 29, 43, 56),
    5: (16, 26, 36, 46, 56),
}
# Mapping-layer counts that pair with the 3-branch widths when depth is reduced too.
DEPTH_PRESET: Tuple[int, ...] = (2, 3, 4)
# Scale of the gate weights at init; keeps the first class probabilities near 1/M.
GATE_GAIN = 0.01


@dataclass
class FsrcnnConfig:
    """Configuration of one FSRCNN-style branch.

    Attributes:
        d: Feature channels of the first conv and the last deconv input.
        s: Shrink channels.
        m: Number of 3x3 mapping layers.
        scale: SR factor.
        channels: Image channels of input and output.
    """

    d: int = 56
    s: int = 12
    m: int = 4
    scale: int = 4
    channels: int = 3

    def validate(self) -> None:
        if not self.d >= self.s >= 1:
            raise ConfigError(f"Need d >= s >= 1: d={self.d}, s={self.s}")
        if self.m < 0 or self.scale < 1 or self.channels not in (1, 3):
            raise ConfigError(
                f"Invalid m={self.m}, scale={self.scale} or channels={self.channels}."
            )


class Fsrcnn(Sequential):
    """FSRCNN: feature extraction, shrink, mapping, expand, deconvolution."""

    def __init__(self, cfg: FsrcnnConfig, rng: Optional[np.random.Generator] = None):
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        layers: List[Tuple[str, Module]] = [
            ("extract", Conv2d(cfg.channels, cfg.d, 5, padding=2, rng=rng)),
            ("extract_act", PReLU(cfg.d)),
            ("shrink", Conv2d(cfg.d, cfg.s, 1, rng=rng)),
            ("shrink_act", PReLU(cfg.s)),
        ]
        for i in range(cfg.m):
            layers.append((f"map{i}", Conv2d(cfg.s, cfg.s, 3, padding=1, rng=rng)))
            layers.append((f"map{i}_act", PReLU(cfg.s)))
        layers += [
            ("expand", Conv2d(cfg.s, cfg.d, 1, rng=rng)),
            ("expand_act", PReLU(cfg.d)),
            (
                "deconv",
                ConvTranspose2d(
                    cfg.d,
                    cfg.channels,
                    9,
                    stride=cfg.scale,
                    padding=4,
                    output_padding=cfg.scale - 1,
                    rng=rng,
                ),
            ),
        ]
        super().__init__(*layers)
        self.cfg = cfg


def build_fsrcnn(cfg: FsrcnnConfig, seed: int = 0) -> Fsrcnn:
    """Build an FSRCNN branch; only ``d`` (and optionally ``m``) differ per branch.

    Raises:
        ConfigError: Invalid widths.
    """
    return Fsrcnn(cfg, rng=np.random.default_rng(seed))


@dataclass
class ClassConfig:
    """Configuration of the Class-Module.

    Attributes:
        channels: Output widths of the five convolution layers.
        strides: Strides of the five convolution layers.
        kernels: Kernel sizes of the five convolution layers.
        classes: Number of classes M.
        in_channels: Image channels.
    """

    channels: List[int] = field(default_factory=lambda: [16, 32, 32, 32, 32])
    strides: List[int] = field(default_factory=lambda: [1, 2, 1, 2, 1])
    kernels: List[int] = field(default_factory=lambda: [3, 3, 3, 3, 3])
    classes: int = 3
    in_channels: int = 3

    def validate(self) -> None:
        if not len(self.channels) == len(self.strides) == len(self.kernels) == 5:
            raise ConfigError("The Class-Module needs exactly five conv layers.")
        if min(self.channels) < 1 or min(self.strides) < 1 or min(self.kernels) < 1:
            raise ConfigError("Class-Module widths, strides and kernels must be >= 1.")
        if self.classes < 2:
            raise ConfigError(f"Need at least two classes: {self.classes}")


class ClassModule(Module):
    """Five convolutions, global average pooling, a fully-connected layer, softmax."""

    def __init__(self, cfg: ClassConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        convs: List[Tuple[str, Module]] = []
        in_channels = cfg.in_channels
        for i, (width, stride, kernel) in enumerate(
            zip(cfg.channels, cfg.strides, cfg.kernels)
        ):
            padding = (kernel - 1) // 2
            conv = Conv2d(in_channels, width, kernel, stride, padding, rng=rng)
            convs += [(f"conv{i}", conv), (f"conv{i}_act", ReLU())]
            in_channels = width
        self.features = self.add_module("features", Sequential(*convs))
        self.pool = self.add_module("pool", GlobalAvgPool())
        self.fc = self.add_module(
            "fc", Linear(in_channels, cfg.classes, rng=rng, gain=GATE_GAIN)
        )
        self.softmax = self.add_module("softmax", Softmax())
        self.cfg = cfg

    def logits(self, x: Tensor) -> Tensor:
        return self.fc(self.pool(self.features(x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.softmax(self.logits(x))

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        total = 0
        for module in (self.features, self.pool, self.fc, self.softmax):
            count, shape = module.flops(shape)
            total += count
        return total, shape


def build_class_module(cfg: ClassConfig, seed: int = 0) -> ClassModule:
    """Build the Class-Module.

    Raises:
        ConfigError: Invalid config.
    """
    return ClassModule(cfg, rng=np.random.default_rng(seed))


def flops(network: Module, input_shape: Sequence[Optional[int]]) -> int:
    """Count FLOPs of ``network`` for a (C, H, W) or (N, C, H, W) input.

    Raises:
        ShapeError: The input shape is not static.
    """
    if any(d is None or int(d) < 1 for d in input_shape) or len(input_shape) not in (
        3,
        4,
    ):
        raise ShapeError(f"FLOPs need a static CHW or NCHW shape: {input_shape}")
    shape = tuple(int(d) for d in input_shape)
    batch = 1
    if len(shape) == 4:
        batch, shape = shape[0], shape[1:]
    count, _ = network.flops(shape)
    return batch * count


class SrContainer(Module):
    """Ordered SR branches of increasing capacity; the last one is the base network.

    Attributes:
        branches (list): The branch networks.
        branch_calls (list): Number of tiles each branch has processed.
    """

    def __init__(self, branches: Sequence[Module], tile_shape: Shape = (3, 32, 32)):
        super().__init__()
        if len(branches) < 2:
            raise ConfigError("An SR container needs at least two branches.")
        self.branches = list(branches)
        for j, branch in enumerate(self.branches):
            self.add_module(f"branch{j}", branch)
        self.tile_shape = tuple(tile_shape)
        self.branch_flops = [flops(b, self.tile_shape) for b in self.branches]
        out_shapes = {b.flops(self.tile_shape)[1] for b in self.branches}
        if len(out_shapes) != 1:
            raise ConfigError(f"Branches disagree on output shape: {out_shapes}")
        if any(a > b for a, b in zip(self.branch_flops, self.branch_flops[1:])):
            raise ConfigError(
                f"Branch FLOPs must be nondecreasing: {self.branch_flops}"
            )
        self.branch_calls = [0] * len(self.branches)

    def __len__(self):
        return len(self.branches)

    @property
    def base_flops(self) -> int:
        return self.branch_flops[-1]

    def reset_counters(self) -> None:
        self.branch_calls = [0] * len(self.branches)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_branch(len(self.branches) - 1, x)

    def forward_branch(self, j: int, x: Tensor) -> Tensor:
        """Run branch ``j`` (0-based) on a batch of tiles.

        Raises:
            ClassSRValueError: Index out of range.
        """
        if not 0 <= j < len(self.branches):
            raise ClassSRValueError(
                f"Branch index {j} is out of range for {len(self.branches)} branches."
            )
        self.branch_calls[j] += x.shape[0]
        return self.branches[j](x)

    def forward_all(self, x: Tensor) -> List[Tensor]:
        """Run every branch on the same batch, in container order."""
        return [self.forward_branch(j, x) for j in range(len(self.branches))]

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        return self.branches[-1].flops(shape)


@dataclass
class ModelSpec:
    """Architecture descriptor stored next to checkpoints."""

    type: str = "classsr-fsrcnn"
    widths: List[int] = field(default_factory=lambda: list(BRANCH_PRESETS[3]))
    mapping_layers: Optional[List[int]] = None
    shrink: int = 12
    scale: int = 4
    channels: int = 3
    tile: int = 32
    class_module: ClassConfig = field(default_factory=ClassConfig)

    @property
    def classes(self) -> int:
        return len(self.widths)

    def branch_configs(self) -> List[FsrcnnConfig]:
        depths = self.mapping_layers or [4] * len(self.widths)
        if len(depths) != len(self.widths):
            raise ConfigError(
                f"{len(depths)} mapping-layer counts for {len(self.widths)} branches."
            )
        return [
            FsrcnnConfig(
                d=d, s=self.shrink, m=m, scale=self.scale, channels=self.channels
            )
            for d, m in zip(self.widths, depths)
        ]

    def class_config(self) -> ClassConfig:
        cfg = ClassConfig(**asdict(self.class_module))
        cfg.classes = self.classes
        cfg.in_channels = self.channels
        return cfg

    def to_dict(self) -> dict:
        data = asdict(self)
        data["M"] = self.classes
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = {k: v for k, v in data.items() if k != "M"}
        class_module = ClassConfig(**data.pop("class_module", {}))
        return cls(class_module=class_module, **data)


def build_container(spec: ModelSpec, seed: int = 0) -> SrContainer:
    """Build the SR container; branch ``j`` is seeded with ``seed + j``."""
    branches = [
        build_fsrcnn(cfg, seed=seed + j) for j, cfg in enumerate(spec.branch_configs())
    ]
    container = SrContainer(branches, tile_shape=(spec.channels, spec.tile, spec.tile))
    logger.debug(f"Built SR container with branch FLOPs {container.branch_flops}.")
    return container
