"""Run configuration: a tree of dataclasses loaded from JSON."""

import json
import os
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import (
    Any,
    List,
    Mapping,
    Optional,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

from .datasets import STORAGE_TYPES
from .exceptions import ClassSRValueError, ConfigError
from .imaging import PSNR_CHANNELS
from .losses import LossWeights
from .models import BRANCH_PRESETS, ClassConfig, ModelSpec

WORKDIR_ENV = "CLASSSR_WORKDIR"
DEFAULT_WORKDIR = "classsr-work"
SCORERS = ["bicubic", "warmup"]


@dataclass
class PathsConfig:
    corpus: Optional[str] = None
    workdir: Optional[str] = None


@dataclass
class ClassModuleConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32, 32, 32, 32])
    strides: List[int] = field(default_factory=lambda: [1, 2, 1, 2, 1])
    kernels: List[int] = field(default_factory=lambda: [3, 3, 3, 3, 3])


@dataclass
class ModelConfig:
    """Branch widths, optional per-branch mapping depths and the Class-Module.

    ``M`` is the number of widths.
    """

    widths: List[int] = field(default_factory=lambda: list(BRANCH_PRESETS[3]))
    mapping_layers: Optional[List[int]] = None
    shrink: int = 12
    scale: int = 4
    channels: int = 3
    class_module: ClassModuleConfig = field(default_factory=ClassModuleConfig)

    @property
    def classes(self) -> int:
        return len(self.widths)


@dataclass
class SynthConfig:
    n_flat: int = 10
    n_texture: int = 10
    n_edge: int = 0
    seed: int = 0
    size: int = 256


@dataclass
class DataConfig:
    """Corpus construction.

    Attributes:
        tile: LR tile side.
        train_stride: Crop stride of training tiles.
        val_stride: Crop stride of validation tiles.
        hr_scales: Factors applied to source images to get HR images.
        val_images: Number of source images held out for validation.
        scorer: "bicubic" or "warmup" difficulty reference.
        warmup_iterations: Training steps of the warmup scorer.
        storage: "packed" or "png" tile storage.
        psnr_channel: "all" or "luma".
        augment: Random flips and rotations while sampling batches.
    """

    tile: int = 32
    train_stride: int = 16
    val_stride: int = 32
    hr_scales: List[float] = field(default_factory=lambda: [1.0])
    val_images: int = 2
    scorer: str = "bicubic"
    warmup_iterations: int = 200
    storage: str = "packed"
    psnr_channel: str = "all"
    augment: bool = True
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class StageSettings:
    iterations: int = 2000
    batch_size: int = 96
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    period: Optional[int] = None
    eval_every: int = 100


@dataclass
class TrainingConfig:
    pretrain: StageSettings = field(
        default_factory=lambda: StageSettings(iterations=5000, batch_size=16)
    )
    classifier: StageSettings = field(default_factory=StageSettings)
    joint: StageSettings = field(default_factory=StageSettings)
    baseline: StageSettings = field(
        default_factory=lambda: StageSettings(iterations=5000, batch_size=16)
    )
    w1: float = 2000.0
    w2: float = 1.0
    w3: float = 6.0
    strict_batch: bool = True
    branch_supervision: bool = False
    val_tiles: int = 256

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w1, self.w2, self.w3)


@dataclass
class EvalConfig:
    stride: int = 28
    test_set: Optional[str] = None
    cost_table: Optional[str] = None


@dataclass
class RunConfig:
    """Everything a run needs; defaults are desk-scale."""

    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> None:
        """Check value ranges and cross-field constraints.

        Raises:
            ConfigError: Invalid configuration.
        """
        model, data, training = self.model, self.data, self.training
        if model.classes < 2:
            raise ConfigError(f"Need at least two branch widths: {model.widths}")
        if model.mapping_layers is not None and len(model.mapping_layers) != len(
            model.widths
        ):
            raise ConfigError("model.mapping_layers needs one entry per width.")
        if data.scorer not in SCORERS:
            raise ConfigError(f"Unknown scorer: {data.scorer}")
        if data.storage not in STORAGE_TYPES:
            raise ConfigError(f"Unknown tile storage: {data.storage}")
        if data.psnr_channel not in PSNR_CHANNELS:
            raise ConfigError(f"Unknown PSNR channel policy: {data.psnr_channel}")
        if min(data.tile, data.train_stride, data.val_stride, self.eval.stride) < 1:
            raise ConfigError("Tile sides and strides must be >= 1.")
        if data.val_images < 0:
            raise ConfigError(f"data.val_images must be >= 0: {data.val_images}")
        if training.branch_supervision:
            raise ConfigError(
                "training.branch_supervision is reserved; only the blended "
                "objective is supported."
            )
        try:
            training.weights.validate()
        except ClassSRValueError as e:
            raise ConfigError(str(e))
        for name in ("pretrain", "classifier", "joint", "baseline"):
            stage = getattr(training, name)
            if stage.iterations < 0 or stage.batch_size < 1 or stage.eval_every < 1:
                raise ConfigError(f"Invalid settings for stage {name}: {stage}")
            if not 0 < stage.lr_min <= stage.lr_max:
                raise ConfigError(f"Need 0 < lr_min <= lr_max for stage {name}.")
            if stage.period is not None and stage.period < 1:
                raise ConfigError(f"Cosine period of stage {name} must be >= 1.")
        if training.strict_batch:
            for name in ("classifier", "joint"):
                batch = getattr(training, name).batch_size
                if batch % model.classes:
                    raise ConfigError(
                        f"Batch size {batch} of stage {name} is not divisible by "
                        f"{model.classes} classes."
                    )
        self.model_spec().class_config().validate()
        for cfg in self.model_spec().branch_configs():
            cfg.validate()

    def model_spec(self) -> ModelSpec:
        model = self.model
        return ModelSpec(
            widths=list(model.widths),
            mapping_layers=(
                list(model.mapping_layers) if model.mapping_layers is not None else None
            ),
            shrink=model.shrink,
            scale=model.scale,
            channels=model.channels,
            tile=self.data.tile,
            class_module=ClassConfig(**asdict(model.class_module)),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _type_name(annotation: Any) -> str:
    if get_origin(annotation) is list:
        return f"a list of {_type_name(get_args(annotation)[0])}"
    return getattr(annotation, "__name__", str(annotation))


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    """Check ``value`` against a field annotation; ints are accepted as floats.

    Raises:
        ConfigError: The value has the wrong type.
    """
    origin = get_origin(annotation)
    if origin is Union:
        if value is None:
            return None
        inner = [a for a in get_args(annotation) if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is list:
        if isinstance(value, list):
            (item,) = get_args(annotation)
            return [_coerce(v, item, key) for v in value]
    elif isinstance(value, bool):
        if annotation is bool:
            return value
    elif annotation is float and isinstance(value, (int, float)):
        return float(value)
    elif isinstance(value, annotation):
        return value
    raise ConfigError(f"Config key {key} must be {_type_name(annotation)}: {value!r}")


def _build(cls, data: Mapping[str, Any], prefix: str = ""):
    if not isinstance(data, Mapping):
        section = prefix.rstrip(".") or "<root>"
        raise ConfigError(f"Config section {section} must be an object.")
    instance = cls()
    hints = get_type_hints(cls)
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"Unknown config key: {prefix}{key}")
        current = getattr(instance, key)
        if is_dataclass(current):
            value = _build(type(current), value, f"{prefix}{key}.")
        else:
            value = _coerce(value, hints[key], f"{prefix}{key}")
        setattr(instance, key, value)
    return instance


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig, applying defaults for absent keys.

    Raises:
        ConfigError: Unknown key, wrong section type or wrong value type.
    """
    return _build(RunConfig, data)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a RunConfig from a JSON file, or the defaults when no path is given.

    Raises:
        ConfigError: The file is not valid JSON or has unknown keys.
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"No config file at {path}.")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    return config_from_dict(data)


def set_value(cfg: RunConfig, key: str, value: Any) -> None:
    """Set a dotted key such as ``training.w2``.

    Raises:
        ConfigError: Unknown key or a value of the wrong type.
    """
    *parents, name = key.split(".")
    target: Any = cfg
    for part in parents:
        if not is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(f"Unknown config key: {key}")
        target = getattr(target, part)
    if not is_dataclass(target):
        raise ConfigError(f"Unknown config key: {key}")
    hints = get_type_hints(type(target))
    if name not in hints:
        raise ConfigError(f"Unknown config key: {key}")
    setattr(target, name, _coerce(value, hints[name], key))


def resolve_workdir(cfg: RunConfig) -> Path:
    """Return the workdir from the config, then CLASSSR_WORKDIR, then the default.

    Note:
        The resolved value is written back to ``cfg.paths.workdir``.
    """
    workdir = cfg.paths.workdir
    if workdir is None:
        workdir = os.getenv(WORKDIR_ENV, DEFAULT_WORKDIR)
    cfg.paths.workdir = str(workdir)
    return Path(workdir)
