"""Three-stage training of the SR branches and the Class-Module."""

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from logging import getLogger
from pathlib import Path
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .datasets import Manifest, Reference, TileSample, sample_batch
from .exceptions import CheckpointError, ConfigError, DatasetError, TrainingError
from .imaging import psnr, to_batch
from .layers import Module
from .losses import (
    LossWeights,
    average_loss,
    blended_output,
    class_loss,
    image_loss,
    total_loss,
)
from .models import (
    ClassModule,
    Fsrcnn,
    FsrcnnConfig,
    ModelSpec,
    SrContainer,
    build_class_module,
    build_container,
    build_fsrcnn,
    flops,
)
from .optim import Adam, CosineSchedule, lr_at
from .router import CostTable, classify_tiles, route_batch, run_routed
from .tensor import Tensor, backward, no_grad
from .utils import AVAILABLE_STAGES

logger = getLogger(__name__)

LOG_KEYS = ["iter", "l1", "lc", "la", "lr", "psnr", "flops", "hist", "val_loss"]
STATE_FORMAT = "classsr-train-state"
NETWORK_FORMAT = "classsr-network"


@dataclass
class StageConfig:
    """Settings of one training stage.

    Attributes:
        stage: "pretrain", "classifier", "joint" or "baseline".
        iterations: Optimizer steps.
        batch_size: Tiles per step (per branch in the pretrain stage).
        lr_max: Initial learning rate.
        lr_min: Final learning rate.
        period: Cosine period; the stage length when None.
        weights: Loss weights of the classifier and joint stages.
        seed: Seed of batch sampling.
        freeze_sr: Keep the SR branches fixed; only valid in the classifier stage.
        eval_every: Iterations between validation points.
        strict_batch: Require the batch to be divisible by the class count.
        augment: Random flips and rotations of sampled tiles.
        channel: PSNR channel policy.
    """

    stage: str
    iterations: int = 0
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    period: Optional[int] = None
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    freeze_sr: bool = False
    eval_every: int = 100
    strict_batch: bool = True
    augment: bool = True
    channel: str = "all"

    @property
    def schedule(self) -> CosineSchedule:
        return CosineSchedule(
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            period=self.period or max(self.iterations, 1),
        )

    def validate(self, classes: int) -> None:
        """Check the stage settings against the class count.

        Raises:
            ConfigError: Invalid values.
            TrainingError: SR freezing does not match the stage.
        """
        if self.stage not in AVAILABLE_STAGES:
            raise ConfigError(f"Unavailable stage: {self.stage}")
        if self.stage == "classifier" and not self.freeze_sr:
            raise TrainingError(
                "The SR branches must be frozen in the classifier stage."
            )
        if self.stage != "classifier" and self.freeze_sr:
            raise TrainingError(f"The {self.stage} stage trains the SR branches.")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError(f"Invalid settings for stage {self.stage}.")
        if (
            self.strict_batch
            and self.stage in ("classifier", "joint")
            and self.batch_size % classes
        ):
            raise ConfigError(
                f"Batch size {self.batch_size} is not divisible by {classes} classes."
            )


class TrainState(object):
    """Parameters, optimizer moments and sampling state of a training run.

    Attributes:
        spec (ModelSpec): The architecture.
        container (SrContainer): The SR branches.
        class_module (ClassModule): The tile classifier.
        optimizers (dict): Adam instances by parameter group.
        stage (str): The last completed stage.
        iteration (int): Steps taken in the last stage.
        rng (np.random.Generator): Batch sampling state.
    """

    def __init__(
        self,
        spec: ModelSpec,
        container: SrContainer,
        class_module: ClassModule,
        stage: str = "init",
        iteration: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        self.spec = spec
        self.container = container
        self.class_module = class_module
        self.optimizers: Dict[str, Adam] = {}
        self.stage = stage
        self.iteration = iteration
        self.rng = rng or np.random.default_rng(0)

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int = 0) -> "TrainState":
        """Build freshly initialized networks; the classifier uses ``seed + M``."""
        container = build_container(spec, seed=seed)
        class_module = build_class_module(spec.class_config(), seed=seed + spec.classes)
        return cls(spec, container, class_module, rng=np.random.default_rng(seed))

    @property
    def classes(self) -> int:
        return len(self.container)

    def param_group(self, group: str) -> Dict[str, Tensor]:
        """Return the named parameters of ``branch<j>``, ``class`` or ``joint``.

        Raises:
            CheckpointError: Unknown group.
        """
        if group.startswith("branch") and group[6:].isdigit():
            j = int(group[6:])
            if j < self.classes:
                return self.container.branches[j].named_parameters()
        if group == "class":
            return self.class_module.named_parameters()
        if group == "joint":
            sr_params = self.container.named_parameters()
            params = {f"sr.{k}": v for k, v in sr_params.items()}
            for k, v in self.class_module.named_parameters().items():
                params[f"class.{k}"] = v
            return params
        raise CheckpointError(f"Unknown parameter group: {group}")

    def optimizer(self, group: str) -> Adam:
        if group not in self.optimizers:
            self.optimizers[group] = Adam(self.param_group(group))
        return self.optimizers[group]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"sr.{k}": v for k, v in self.container.state_arrays().items()}
        for k, v in self.class_module.state_arrays().items():
            arrays[f"class.{k}"] = v
        for group, opt in sorted(self.optimizers.items()):
            arrays.update(opt.state_arrays(f"adam.{group}"))
        return arrays

    def save(self, path: Union[str, Path]) -> Path:
        """Write parameters, moments and the sampling state as one CSR1 file."""
        meta = {
            "format": STATE_FORMAT,
            "model": self.spec.to_dict(),
            "stage": self.stage,
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "optimizers": {
                group: opt.state.step_count
                for group, opt in sorted(self.optimizers.items())
            },
        }
        path = save_arrays(path, self.state_arrays(), meta=meta)
        logger.info(f"Saved {self.stage} state to {path}.")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainState":
        """Read a state written by :meth:`save`.

        Raises:
            CheckpointError: The file is not a training state or misses entries.
        """
        arrays, meta = load_arrays(path)
        if meta.get("format") != STATE_FORMAT:
            raise CheckpointError(f"{path} is not a training state.")
        spec = ModelSpec.from_dict(meta["model"])
        state = cls.initialize(spec)
        try:
            state.container.load_state_arrays(_strip(arrays, "sr."))
            state.class_module.load_state_arrays(_strip(arrays, "class."))
            for group, steps in meta["optimizers"].items():
                state.optimizer(group).load_state_arrays(f"adam.{group}", arrays, steps)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path} misses entries: {e}")
        state.stage = meta["stage"]
        state.iteration = int(meta["iteration"])
        state.rng.bit_generator.state = meta["rng"]
        return state


def _strip(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


def save_network(path: Union[str, Path], network: Fsrcnn) -> Path:
    """Write a standalone FSRCNN with its configuration."""
    meta = {"format": NETWORK_FORMAT, "config": asdict(network.cfg)}
    return save_arrays(path, network.state_arrays(), meta=meta)


def load_network(path: Union[str, Path]) -> Fsrcnn:
    """Read a network written by :func:`save_network`.

    Raises:
        CheckpointError: The file is not a standalone network.
    """
    arrays, meta = load_arrays(path)
    if meta.get("format") != NETWORK_FORMAT:
        raise CheckpointError(f"{path} is not a standalone network.")
    network = build_fsrcnn(FsrcnnConfig(**meta["config"]))
    network.load_state_arrays(arrays)
    return network


class TrainingSession(object):
    """Records the steps and validation points of a training stage.

    Every record is a JSON line with the keys of ``LOG_KEYS``; the first line of
    the log is a header holding the stage settings and loss weights.
    """

    def __init__(
        self, log_path: Optional[Union[str, Path]] = None, history_size: int = 10000
    ):
        self.log_path = Path(log_path) if log_path is not None else None
        self.step_histories: deque = deque(maxlen=history_size)
        self.eval_histories: deque = deque(maxlen=history_size)

        self.step_callbacks: List[Callable] = []
        self.eval_callbacks: List[Callable] = []
        self._file: Optional[IO[str]] = None

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def open(self, header: Dict[str, Any]) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._file = self.log_path.open("w", encoding="utf-8")
        self._write(dict(header, header=True))

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def _write(self, record: Dict[str, Any]) -> None:
        if self._file is not None:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")

    def record(self, record: Dict[str, Any]) -> None:
        """Store a step record and pass it to the callbacks."""
        record = {key: record.get(key) for key in LOG_KEYS}
        logger.debug(f"step {record['iter']}: l1={record['l1']} lr={record['lr']}")
        self.step_histories.append(record)
        for callback in self.step_callbacks:
            callback(record)
        if record["psnr"] is not None:
            logger.info(
                f"iter {record['iter']}: psnr={record['psnr']:.3f} "
                f"flops={record['flops']} hist={record['hist']}"
            )
            self.eval_histories.append(record)
            for callback in self.eval_callbacks:
                callback(record)
        self._write(record)

    def add_step_callback(self, callback: Callable) -> None:
        """Add step callback."""
        self.step_callbacks.append(callback)

    def add_eval_callback(self, callback: Callable) -> None:
        """Add eval callback."""
        self.eval_callbacks.append(callback)

    def write_curve(self, path: Union[str, Path], classes: int) -> Path:
        """Write the validation points as CSV."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                ["iteration", "psnr", "avg_flops"]
                + [f"class{j}" for j in range(classes)]
            )
            for record in self.eval_histories:
                hist = record["hist"] or [""] * classes
                row = [record["iter"], record["psnr"], record["flops"]]
                writer.writerow(row + hist)
        return path


@dataclass
class EvalResult:
    """Validation metrics of hard (argmax) routing.

    Attributes:
        psnr: Mean tile PSNR.
        avg_flops: Histogram-weighted branch FLOPs plus the Class-Module FLOPs.
        class_histogram: Fraction of tiles routed to each branch.
        tiles: Number of tiles.
        per_kind: Routing histogram per synthetic population.
        mean_max_prob: Mean of the largest class probability.
    """

    psnr: float
    avg_flops: float
    class_histogram: List[float]
    tiles: int
    per_kind: Dict[str, List[float]] = field(default_factory=dict)
    mean_max_prob: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def _histogram(routes: np.ndarray, classes: int) -> List[float]:
    counts = np.bincount(routes, minlength=classes)
    return [float(c) / len(routes) for c in counts]


def evaluate(
    state: TrainState,
    samples: Sequence[TileSample],
    channel: str = "all",
    labels: Optional[Sequence[int]] = None,
) -> EvalResult:
    """Route every tile through one branch and measure PSNR and FLOPs.

    Args:
        state: Networks to evaluate.
        samples: Validation tiles.
        channel: PSNR channel policy.
        labels: Route by these branch indices instead of the Class-Module.

    Raises:
        DatasetError: No samples.
    """
    if not samples:
        raise DatasetError("Cannot evaluate on an empty validation set.")
    classes = state.classes
    batch = to_batch([s.lr for s in samples])
    if labels is None:
        probs = classify_tiles(state.class_module, batch)
        routes = route_batch(probs)
        mean_max_prob = float(np.mean(probs.max(axis=1)))
    else:
        routes = np.asarray(labels, dtype=np.int64)
        mean_max_prob = 1.0
    sr = run_routed(state.container, batch, routes)
    scores = [
        psnr(np.clip(out.transpose(1, 2, 0), 0, 1), s.hr, channel)
        for out, s in zip(sr, samples)
    ]
    histogram = _histogram(routes, classes)
    costs = CostTable.from_models(state.container, state.class_module)
    avg_flops = sum(h * c for h, c in zip(histogram, costs.branch_flops))
    per_kind = {}
    kinds = np.array([s.kind for s in samples])
    for kind in sorted(set(kinds) - {""}):
        per_kind[kind] = _histogram(routes[kinds == kind], classes)
    return EvalResult(
        psnr=float(np.mean(scores)),
        avg_flops=avg_flops + costs.class_flops,
        class_histogram=histogram,
        tiles=len(samples),
        per_kind=per_kind,
        mean_max_prob=mean_max_prob,
    )


def compute_loss(
    state: TrainState,
    lr_batch: np.ndarray,
    hr_batch: np.ndarray,
    weights: LossWeights,
    strict: bool = True,
    freeze_sr: bool = False,
) -> Dict[str, Tensor]:
    """Blended-output loss of a batch: total, l1, lc and la tensors."""
    x = Tensor(lr_batch)
    probs = state.class_module(x)
    if freeze_sr:
        with no_grad():
            outputs = state.container.forward_all(x)
    else:
        outputs = state.container.forward_all(x)
    y = blended_output(probs, outputs)
    l1 = image_loss(y, Tensor(hr_batch))
    lc = class_loss(probs)
    la = average_loss(probs, strict=strict)
    return {"total": total_loss(l1, lc, la, weights), "l1": l1, "lc": lc, "la": la}


def _run_stage(
    cfg: StageConfig,
    session: TrainingSession,
    step: Callable[[float], Dict[str, Any]],
    validate: Optional[Callable[[], Dict[str, Any]]],
) -> int:
    schedule = cfg.schedule
    session.open(
        {"stage": cfg.stage, "weights": asdict(cfg.weights), "config": asdict(cfg)}
    )
    logger.info(f"Starting {cfg.stage} stage for {cfg.iterations} iterations.")
    for t in range(cfg.iterations):
        lr = lr_at(schedule, min(t, schedule.period))
        record = {"iter": t + 1, "lr": lr}
        record.update(step(lr))
        if validate is not None and (
            (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.iterations
        ):
            record.update(validate())
        session.record(record)
    logger.info(f"Finished {cfg.stage} stage.")
    return cfg.iterations


def _eval_record(result: EvalResult) -> Dict[str, Any]:
    return {
        "psnr": result.psnr,
        "flops": result.avg_flops,
        "hist": result.class_histogram,
    }


def _validation_loss(
    state: TrainState, samples: Sequence[TileSample], cfg: StageConfig
) -> float:
    """Total blended loss on the fixed validation tiles, without augmentation."""
    with no_grad():
        losses = compute_loss(
            state,
            to_batch([s.lr for s in samples]),
            to_batch([s.hr for s in samples]),
            cfg.weights,
            strict=False,
            freeze_sr=cfg.freeze_sr,
        )
    return losses["total"].item()


def pretrain_branches(
    manifest: Manifest,
    state: TrainState,
    cfg: StageConfig,
    session: Optional[TrainingSession] = None,
    val_samples: Optional[Sequence[TileSample]] = None,
) -> TrainState:
    """Train branch ``j`` with L1 on the class-``j`` tiles only.

    Each branch has its own optimizer, so a step of one branch never touches the
    parameters of another.

    Raises:
        TrainingError: A class has no tiles.
    """
    cfg.validate(state.classes)
    if manifest.classes != state.classes:
        raise TrainingError(
            f"The manifest has {manifest.classes} classes for {state.classes} branches."
        )
    groups = [manifest.of_class(j) for j in range(state.classes)]
    for j, group in enumerate(groups):
        if not group:
            raise TrainingError(f"Class {j} has no training tiles.")
    session = session or TrainingSession()
    rng = np.random.default_rng(cfg.seed)
    state.container.set_requires_grad(True)

    def step(lr: float) -> Dict[str, Any]:
        losses = []
        for j, group in enumerate(groups):
            lr_b, hr_b = sample_batch(group, cfg.batch_size, rng, cfg.augment)
            y = state.container.forward_branch(j, Tensor(lr_b))
            l1 = image_loss(y, Tensor(hr_b))
            backward(l1)
            state.optimizer(f"branch{j}").step(lr)
            losses.append(l1.item())
        return {"l1": float(np.mean(losses))}

    def validate() -> Dict[str, Any]:
        labels = [s.class_label for s in val_samples or []]
        result = evaluate(state, val_samples or [], cfg.channel, labels=labels)
        return _eval_record(result)

    state.iteration = _run_stage(
        cfg, session, step, validate if val_samples else None
    )
    state.stage = "pretrain"
    state.rng = rng
    return state


def train_classifier(
    manifest: Manifest,
    state: TrainState,
    cfg: StageConfig,
    session: Optional[TrainingSession] = None,
    val_samples: Optional[Sequence[TileSample]] = None,
) -> TrainState:
    """Train the Class-Module on all tiles with the SR branches fixed.

    Raises:
        TrainingError: ``cfg.freeze_sr`` is not set.
        DatasetError: No tiles.
    """
    cfg.validate(state.classes)
    return _train_blended(manifest, state, cfg, session, val_samples, "class")


def joint_finetune(
    manifest: Manifest,
    state: TrainState,
    cfg: StageConfig,
    session: Optional[TrainingSession] = None,
    val_samples: Optional[Sequence[TileSample]] = None,
) -> TrainState:
    """Train the SR branches and the Class-Module together.

    Raises:
        TrainingError: ``cfg.freeze_sr`` is set.
        DatasetError: No tiles.
    """
    cfg.validate(state.classes)
    return _train_blended(manifest, state, cfg, session, val_samples, "joint")


def _train_blended(
    manifest: Manifest,
    state: TrainState,
    cfg: StageConfig,
    session: Optional[TrainingSession],
    val_samples: Optional[Sequence[TileSample]],
    group: str,
) -> TrainState:
    samples = manifest.samples
    if not samples:
        raise DatasetError("Cannot train on an empty manifest.")
    session = session or TrainingSession()
    rng = np.random.default_rng(cfg.seed)
    state.container.set_requires_grad(not cfg.freeze_sr)
    state.class_module.set_requires_grad(True)
    opt = state.optimizer(group)

    def step(lr: float) -> Dict[str, Any]:
        lr_b, hr_b = sample_batch(samples, cfg.batch_size, rng, cfg.augment)
        losses = compute_loss(
            state, lr_b, hr_b, cfg.weights, cfg.strict_batch, cfg.freeze_sr
        )
        backward(losses["total"])
        opt.step(lr)
        return {key: losses[key].item() for key in ("l1", "lc", "la")}

    def validate() -> Dict[str, Any]:
        record = _eval_record(evaluate(state, val_samples or [], cfg.channel))
        record["val_loss"] = _validation_loss(state, val_samples or [], cfg)
        return record

    state.iteration = _run_stage(
        cfg, session, step, validate if val_samples else None
    )
    state.container.set_requires_grad(True)
    state.stage = cfg.stage
    state.rng = rng
    return state


def train_baseline(
    manifest: Manifest,
    spec: ModelSpec,
    cfg: StageConfig,
    session: Optional[TrainingSession] = None,
    val_samples: Optional[Sequence[TileSample]] = None,
) -> Fsrcnn:
    """Train one base-width network on all tiles with L1.

    Raises:
        DatasetError: No tiles.
    """
    cfg.validate(spec.classes)
    if not manifest.samples:
        raise DatasetError("Cannot train on an empty manifest.")
    session = session or TrainingSession()
    rng = np.random.default_rng(cfg.seed)
    network = build_fsrcnn(spec.branch_configs()[-1], seed=cfg.seed)
    opt = Adam(network.named_parameters())
    cost = flops(network, (spec.channels, spec.tile, spec.tile))

    def step(lr: float) -> Dict[str, Any]:
        lr_b, hr_b = sample_batch(manifest.samples, cfg.batch_size, rng, cfg.augment)
        l1 = image_loss(network(Tensor(lr_b)), Tensor(hr_b))
        backward(l1)
        opt.step(lr)
        return {"l1": l1.item()}

    def validate() -> Dict[str, Any]:
        score = network_psnr(network, val_samples or [], cfg.channel)
        return {"psnr": score, "flops": cost, "hist": None}

    _run_stage(cfg, session, step, validate if val_samples else None)
    return network


def network_reference(network: Module, batch_size: int = 64) -> Reference:
    """Wrap a network as an NCHW LR to NCHW SR scorer."""

    def reference(batch: np.ndarray) -> np.ndarray:
        outputs = []
        with no_grad():
            for start in range(0, len(batch), batch_size):
                outputs.append(network(Tensor(batch[start : start + batch_size])).data)
        return np.concatenate(outputs, axis=0)

    return reference


def network_psnr(
    network: Module, samples: Sequence[TileSample], channel: str = "all"
) -> float:
    """Mean tile PSNR of a single network."""
    if not samples:
        raise DatasetError("Cannot evaluate on an empty validation set.")
    sr = network_reference(network)(to_batch([s.lr for s in samples]))
    return float(
        np.mean(
            [
                psnr(np.clip(out.transpose(1, 2, 0), 0, 1), s.hr, channel)
                for out, s in zip(sr, samples)
            ]
        )
    )


def warmup_reference(
    samples: Sequence[TileSample],
    spec: ModelSpec,
    iterations: int,
    batch_size: int = 16,
    seed: int = 0,
) -> Reference:
    """Train the base-width branch briefly on all tiles and use it as the scorer."""
    cfg = StageConfig(
        stage="baseline", iterations=iterations, batch_size=batch_size, seed=seed
    )
    network = train_baseline(Manifest(samples=list(samples)), spec, cfg)
    logger.info(f"Trained the warmup scorer for {iterations} iterations.")
    return network_reference(network)


def branch_class_table(
    state: TrainState, samples: Sequence[TileSample], channel: str = "all"
) -> List[List[Optional[float]]]:
    """PSNR of every branch (rows) on the tiles of every class (columns)."""
    table: List[List[Optional[float]]] = []
    for branch in state.container.branches:
        row: List[Optional[float]] = []
        for label in range(state.classes):
            group = [s for s in samples if s.class_label == label]
            row.append(network_psnr(branch, group, channel) if group else None)
        table.append(row)
    return table


def write_branch_table(
    path: Union[str, Path], table: List[List[Optional[float]]], state: TrainState
) -> Path:
    """Write the branch-by-class PSNR table with branch widths and FLOPs as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["branch", "width", "flops"] + [f"class{j}" for j in range(state.classes)]
        )
        for j, row in enumerate(table):
            cells = ["" if v is None else f"{v:.4f}" for v in row]
            writer.writerow(
                [j, state.spec.widths[j], state.container.branch_flops[j]] + cells
            )
    return path
