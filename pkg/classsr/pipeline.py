"""Workdir-level orchestration of preparation, training, inference and evaluation.

Every output of a run lives under one workdir, in ``manifest/``, ``checkpoints/``,
``logs/``, ``infer/`` and ``eval/``. Each directory holding results also gets the
effective configuration that produced it.
"""

import json
from dataclasses import asdict
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import RunConfig, resolve_workdir
from .datasets import (
    Manifest,
    Reference,
    SynthSpec,
    TileSample,
    bicubic_reference,
    build_manifest,
    prepare_pairs,
    synth_corpus,
    synth_kinds,
    write_difficulty_curve,
)
from .exceptions import ClassSRValueError, DatasetError, TrainingError
from .imaging import decompose, from_batch, psnr, recombine, to_batch
from .models import Fsrcnn, flops
from .router import (
    CostTable,
    RoutingReport,
    class_map_overlay,
    flops_summary,
    super_resolve,
)
from .training import (
    StageConfig,
    TrainingSession,
    TrainState,
    branch_class_table,
    joint_finetune,
    load_network,
    network_reference,
    pretrain_branches,
    save_network,
    train_baseline,
    train_classifier,
    warmup_reference,
    write_branch_table,
)
from .utils import check_stage, import_image_io

logger = getLogger(__name__)

PREREQUISITES = {"classifier": "pretrain", "joint": "classifier"}
ROUTED_STAGES = ["joint", "classifier", "pretrain"]
CONFIG_FILE = "effective_config.json"


class Pipeline(object):
    """Runs data preparation, training, inference and evaluation in a workdir.

    Attributes:
        config (RunConfig): The effective configuration.
        workdir (Path): Root of every output.

    Examples:
        >>> pipeline = Pipeline(load_config("run.json"))
        >>> pipeline.prepare()
        {'train': [120, 120, 120], 'val': [8, 8, 8]}
        >>> pipeline.train("pretrain")
        PosixPath('classsr-work/checkpoints/pretrain.csr')
    """

    def __init__(
        self,
        config: Optional[RunConfig] = None,
        workdir: Optional[Union[str, Path]] = None,
    ):
        """Initialize the pipeline.

        Args:
            config: Run configuration; the defaults when None.
            workdir: Overrides ``config.paths.workdir``.

        Note:
            If no workdir is set, the environment variable "CLASSSR_WORKDIR" is
            used, and "classsr-work" when that is not set either.

        Raises:
            ConfigError: Invalid configuration.
        """
        config = config or RunConfig()
        if workdir is not None:
            config.paths.workdir = str(workdir)
        self.workdir = resolve_workdir(config)
        config.validate()
        self.config = config
        self.spec = config.model_spec()

    @property
    def manifest_dir(self) -> Path:
        return self.workdir / "manifest"

    def checkpoint_path(self, stage: str) -> Path:
        return self.workdir / "checkpoints" / f"{stage}.csr"

    def log_path(self, stage: str) -> Path:
        return self.workdir / "logs" / f"{stage}.jsonl"

    def write_effective_config(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / CONFIG_FILE
        path.write_text(self.config.to_json(), encoding="utf-8")
        return path

    def load_corpus(self) -> Tuple[List[np.ndarray], List[str], List[str]]:
        """Return the source images with their names and population kinds.

        Raises:
            DatasetError: The corpus is empty or missing.
        """
        corpus = self.config.paths.corpus
        if corpus is not None:
            directory = Path(corpus)
            if not directory.is_dir():
                raise DatasetError(f"No corpus directory at {directory}.")
            paths = sorted(directory.glob("*.png"))
            image_io = import_image_io()
            images = [image_io.read_image(p) for p in paths]
            names = [p.stem for p in paths]
            kinds = [""] * len(paths)
        else:
            spec = SynthSpec(**asdict(self.config.data.synth))
            images = synth_corpus(spec)
            kinds = synth_kinds(spec)
            names = [f"synth{i:04d}_{kind}" for i, kind in enumerate(kinds)]
        if not images:
            raise DatasetError("The corpus has no images.")
        return images, names, kinds

    def _split(self, count: int) -> Tuple[List[int], List[int]]:
        held_out = min(self.config.data.val_images, count - 1)
        train = list(range(count - held_out))
        return train, list(range(count - held_out, count))

    def _reference_factory(self):
        data = self.config.data
        cache: Dict[str, Reference] = {}

        def make_reference(samples: Sequence[TileSample]) -> Reference:
            if "reference" not in cache:
                if data.scorer == "warmup":
                    cache["reference"] = warmup_reference(
                        samples,
                        self.spec,
                        data.warmup_iterations,
                        seed=self.config.seed,
                    )
                else:
                    cache["reference"] = bicubic_reference(self.spec.scale)
            return cache["reference"]

        return make_reference

    def prepare(self) -> Dict[str, List[int]]:
        """Build, score and partition the training and validation tiles.

        Returns:
            Per-class tile counts of the training and validation manifests.

        Raises:
            DatasetError: The corpus is empty or yields no tiles.
        """
        data = self.config.data
        images, names, kinds = self.load_corpus()
        train_idx, val_idx = self._split(len(images))
        make_reference = self._reference_factory()
        provenance = {"seed": self.config.seed, "scorer": data.scorer}

        def build(indices: List[int], stride: int) -> Manifest:
            return build_manifest(
                [images[i] for i in indices],
                [names[i] for i in indices],
                self.spec.classes,
                make_reference,
                hr_scales=data.hr_scales,
                sr_scale=self.spec.scale,
                tile=data.tile,
                stride=stride,
                kinds=[kinds[i] for i in indices],
                channel=data.psnr_channel,
                provenance=provenance,
            )

        train = build(train_idx, data.train_stride)
        val = build(val_idx, data.val_stride) if val_idx else None

        train.save(self.manifest_dir / "train", storage=data.storage)
        curve = self.manifest_dir / "difficulty_curve.csv"
        write_difficulty_curve(curve, train.samples)
        counts = {"train": train.counts, "val": []}
        if val is not None:
            val.save(self.manifest_dir / "val", storage=data.storage)
            counts["val"] = val.counts
        self.write_effective_config(self.workdir)
        return counts

    def load_manifest(self, split: str = "train") -> Manifest:
        """Load a prepared manifest.

        Raises:
            DatasetError: The manifest has not been prepared.
        """
        directory = self.manifest_dir / split
        if not (directory / "manifest.json").exists():
            raise DatasetError(
                f"No {split} manifest in {directory}; run prepare first."
            )
        return Manifest.load(directory)

    def validation_samples(self) -> List[TileSample]:
        """Up to ``training.val_tiles`` evenly spaced validation tiles."""
        if not (self.manifest_dir / "val" / "manifest.json").exists():
            return []
        samples = self.load_manifest("val").samples
        limit = self.config.training.val_tiles
        if len(samples) > limit:
            picks = np.linspace(0, len(samples) - 1, limit).round().astype(int)
            samples = [samples[i] for i in picks]
        return samples

    def stage_config(self, stage: str) -> StageConfig:
        training = self.config.training
        settings = getattr(training, stage)
        return StageConfig(
            stage=stage,
            iterations=settings.iterations,
            batch_size=settings.batch_size,
            lr_max=settings.lr_max,
            lr_min=settings.lr_min,
            period=settings.period,
            weights=training.weights,
            seed=self.config.seed,
            freeze_sr=stage == "classifier",
            eval_every=settings.eval_every,
            strict_batch=training.strict_batch,
            augment=self.config.data.augment,
            channel=self.config.data.psnr_channel,
        )

    @check_stage
    def train(self, stage: str) -> Path:
        """Run one training stage and write its checkpoint, log and curve.

        Args:
            stage: pretrain, classifier, joint or baseline.

        Returns:
            The checkpoint path.

        Raises:
            ConfigError: Unknown stage.
            TrainingError: The prerequisite checkpoint is missing.
            DatasetError: The manifest has not been prepared.
        """
        if stage in PREREQUISITES:
            required = self.checkpoint_path(PREREQUISITES[stage])
            if not required.exists():
                raise TrainingError(f"Missing prerequisite checkpoint: {required}")
        manifest = self.load_manifest("train")
        val_samples = self.validation_samples()
        cfg = self.stage_config(stage)
        path = self.checkpoint_path(stage)
        logs = self.workdir / "logs"

        with TrainingSession(self.log_path(stage)) as session:
            if stage == "baseline":
                network = train_baseline(manifest, self.spec, cfg, session, val_samples)
                save_network(path, network)
            elif stage == "pretrain":
                state = TrainState.initialize(self.spec, seed=self.config.seed)
                pretrain_branches(manifest, state, cfg, session, val_samples)
                state.save(path)
                table = branch_class_table(
                    state, val_samples or manifest.samples, cfg.channel
                )
                write_branch_table(logs / "branch_table.csv", table, state)
            else:
                state = TrainState.load(self.checkpoint_path(PREREQUISITES[stage]))
                run = train_classifier if stage == "classifier" else joint_finetune
                run(manifest, state, cfg, session, val_samples)
                state.save(path)
        session.write_curve(logs / f"{stage}_curve.csv", self.spec.classes)
        self.write_effective_config(logs)
        return path

    def load_state(self) -> TrainState:
        """Load the most trained routed checkpoint.

        Raises:
            TrainingError: No stage has been trained.
        """
        for stage in ROUTED_STAGES:
            path = self.checkpoint_path(stage)
            if path.exists():
                logger.info(f"Using the {stage} checkpoint {path}.")
                return TrainState.load(path)
        raise TrainingError(
            f"No checkpoint in {self.workdir / 'checkpoints'}; run train first."
        )

    def infer(
        self,
        image_path: Union[str, Path],
        out_dir: Optional[Union[str, Path]] = None,
        force_branch: Optional[int] = None,
        labels_path: Optional[Union[str, Path]] = None,
    ) -> RoutingReport:
        """Super-resolve one PNG and write ``sr.png``, ``overlay.png``, ``report.json``.

        Args:
            image_path: LR input image.
            out_dir: Output directory; ``<workdir>/infer/<stem>`` when None.
            force_branch: Route every tile to this 0-based branch.
            labels_path: JSON list of per-tile branch indices.

        Raises:
            GridError: The image is smaller than a tile.
            TrainingError: No checkpoint.
        """
        image_io = import_image_io()
        image_path = Path(image_path)
        out = Path(out_dir) if out_dir else self.workdir / "infer" / image_path.stem
        labels = None
        if labels_path is not None:
            labels = json.loads(Path(labels_path).read_text(encoding="utf-8"))
        state = self.load_state()
        image = image_io.read_image(image_path)
        sr, report = super_resolve(
            image,
            state.container,
            state.class_module,
            tile=self.spec.tile,
            stride=self.config.eval.stride,
            scale=state.spec.scale,
            force_branch=force_branch,
            labels=labels,
        )
        overlay = class_map_overlay(report, image, state.spec.scale)
        image_io.write_image(out / "sr.png", sr)
        image_io.write_image(out / "overlay.png", overlay)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        self.write_effective_config(out)
        logger.info(f"Wrote inference artifacts to {out}.")
        return report

    def load_test_set(
        self, test_set: Optional[Union[str, Path]] = None
    ) -> List[Tuple[str, str, np.ndarray, np.ndarray]]:
        """Return (name, kind, LR, HR) tuples of the test images.

        A test directory holds HR PNGs, either directly or under ``HR/``, and
        optionally the LR counterparts under ``LR/`` with the same names. HR
        images without LR are trimmed to a multiple of the scale and
        bicubic-downsampled. Without a test directory the held-out corpus
        images are used; only they carry a population kind.

        Raises:
            DatasetError: No test images or HR and LR names differ.
        """
        scale = self.spec.scale
        test_set = test_set or self.config.eval.test_set
        if test_set is None:
            images, names, kinds = self.load_corpus()
            _, val_idx = self._split(len(images))
            hr_images = [(names[i], images[i]) for i in val_idx]
            kind_of = {names[i]: kinds[i] for i in val_idx}
            lr_images: Dict[str, np.ndarray] = {}
        else:
            image_io = import_image_io()
            root = Path(test_set)
            hr_dir = root / "HR" if (root / "HR").is_dir() else root
            hr_paths = sorted(hr_dir.glob("*.png"))
            hr_images = [(p.stem, image_io.read_image(p)) for p in hr_paths]
            lr_images = {}
            kind_of = {}
            if (root / "LR").is_dir():
                lr_paths = sorted((root / "LR").glob("*.png"))
                if sorted(p.stem for p in lr_paths) != sorted(n for n, _ in hr_images):
                    raise DatasetError(f"Unpaired test data in {root}.")
                lr_images = {p.stem: image_io.read_image(p) for p in lr_paths}
        if not hr_images:
            raise DatasetError("The test set has no images.")

        items = []
        for name, hr in hr_images:
            if name in lr_images:
                lr = lr_images[name]
                if hr.shape[:2] != (lr.shape[0] * scale, lr.shape[1] * scale):
                    raise DatasetError(f"Unpaired test data: {name} is not {scale}x.")
            else:
                hr, lr = prepare_pairs([hr], [1.0], scale)[0]
            items.append((name, kind_of.get(name, ""), lr, hr))
        return items

    def _original_sr(self, network: Fsrcnn, lr: np.ndarray) -> np.ndarray:
        tiles, grid = decompose(lr, self.spec.tile, self.config.eval.stride)
        sr = network_reference(network)(to_batch(tiles))
        return np.clip(recombine(from_batch(sr), grid, self.spec.scale), 0.0, 1.0)

    def evaluate(
        self,
        test_set: Optional[Union[str, Path]] = None,
        cost_table: Optional[Union[str, Path]] = None,
    ) -> Dict[str, Any]:
        """Compare routed inference with the forced-base network on a test set.

        Writes ``<workdir>/eval/metrics.json`` with per-image rows and the
        aggregate of the routed, base and (when trained) original networks.

        Raises:
            DatasetError: No or unpaired test data.
            TrainingError: No checkpoint.
        """
        channel = self.config.data.psnr_channel
        state = self.load_state()
        cost_table = cost_table or self.config.eval.cost_table
        if cost_table is not None:
            costs = CostTable.load(cost_table)
        else:
            costs = CostTable.from_models(state.container, state.class_module)
        if len(costs.branch_flops) != state.classes:
            raise ClassSRValueError(
                f"The cost table lists {len(costs.branch_flops)} branches, "
                f"the model has {state.classes}."
            )
        original, original_flops = None, 0
        if self.checkpoint_path("baseline").exists():
            original = load_network(self.checkpoint_path("baseline"))
            original_flops = flops(original, state.container.tile_shape)

        rows = []
        reports: Dict[str, List[RoutingReport]] = {"routed": [], "base": []}
        kind_reports: Dict[str, List[RoutingReport]] = {}
        for name, kind, lr, hr in self.load_test_set(test_set):
            row: Dict[str, Any] = {"name": name, "kind": kind}
            for key, force in (("routed", None), ("base", state.classes - 1)):
                _, report = super_resolve(
                    lr,
                    state.container,
                    state.class_module,
                    tile=self.spec.tile,
                    stride=self.config.eval.stride,
                    scale=state.spec.scale,
                    force_branch=force,
                    hr=hr,
                    channel=channel,
                )
                reports[key].append(report)
                row[key] = _summary(report, costs)
                if key == "routed" and kind:
                    kind_reports.setdefault(kind, []).append(report)
            if original is not None:
                row["original"] = {
                    "psnr": psnr(self._original_sr(original, lr), hr, channel),
                    "avg_flops": float(original_flops),
                    "ratio_vs_base": original_flops / costs.base_flops,
                }
            rows.append(row)

        aggregate: Dict[str, Any] = {}
        for key, items in reports.items():
            aggregate[key] = _summary(_merge(items, state.classes, costs), costs)
        if kind_reports:
            aggregate["routed"]["per_kind"] = {
                kind: _merge(items, state.classes, costs).histogram
                for kind, items in sorted(kind_reports.items())
            }
        if original is not None:
            aggregate["original"] = {
                "psnr": float(np.mean([row["original"]["psnr"] for row in rows])),
                "avg_flops": float(original_flops),
                "ratio_vs_base": original_flops / costs.base_flops,
            }
        metrics = {
            "aggregate": aggregate,
            "images": rows,
            "cost_table": asdict(costs),
        }
        out = self.workdir / "eval"
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8"
        )
        self.write_effective_config(out)
        logger.info(f"Wrote metrics of {len(rows)} images to {out}.")
        return metrics


def _merge(
    reports: List[RoutingReport], classes: int, costs: CostTable
) -> RoutingReport:
    return RoutingReport(
        per_tile=[t for r in reports for t in r.per_tile],
        classes=classes,
        class_flops=costs.class_flops,
        psnr=float(np.mean([r.psnr for r in reports])),
    )


def _summary(report: RoutingReport, costs: CostTable) -> Dict[str, Any]:
    summary = flops_summary(report, cost_table=costs)
    return {
        "psnr": report.psnr,
        "avg_flops": summary["avg_flops"],
        "ratio_vs_base": summary["ratio_vs_base"],
        "histogram": report.histogram,
        "percentages": report.percentages,
        "tiles": report.tiles_total,
    }
