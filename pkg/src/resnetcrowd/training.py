"""Training loop, loss history and the single- vs multi-task ablation suite."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import NonFiniteError
from .data.manifest import CrowdSample, augment_hflip
from .losses import TaskMask, TaskTargets, task_losses, total_loss
from .model import TASKS, ResnetCrowdConfig, ResnetCrowdModel, build_model, normalize_images, save_checkpoint
from .optim import AdaGrad

logger = logging.getLogger(__name__)

# name -> (table label, tasks trained)
CANONICAL_RUNS: dict[str, tuple[str, TaskMask]] = {
    "single_behaviour": ("Single Task Behaviour", TaskMask.only("behaviour")),
    "single_density": ("Single Task Density Level Estimation", TaskMask.only("density")),
    "single_count_reg": ("Single Task Regression Counting", TaskMask.only("count_reg")),
    "single_count_heatmap": ("Single Task Heatmap Counting", TaskMask.only("count_heatmap")),
    "resnetcrowd": ("ResnetCrowd", TaskMask()),
}

HISTORY_COLUMNS = ("epoch", "loss_behave", "loss_density", "loss_count_reg", "loss_heatmap", "loss_total")
_TASK_COLUMN = dict(zip(TASKS, HISTORY_COLUMNS[1:5]))


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message: str, epoch: int, batch: int, last_checkpoint: Path | None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 40
    tasks: TaskMask = field(default_factory=TaskMask)
    learning_rate: float = 0.01
    adagrad_epsilon: float = 1e-8
    weight_decay: float = 1e-4
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 50  # 0 disables periodic checkpoints; the final one is always written
    checkpoint_dir: Path | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalisation")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class TrainHistory:
    """Per-epoch mean of each trained loss term and of their sum."""

    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                row = [r["epoch"]]
                for task in TASKS:
                    v = r["losses"].get(task)
                    row.append("" if v is None else repr(v))
                row.append(repr(r["total"]))
                writer.writerow(row)
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainHistory":
        records = []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                losses = {t: float(row[c]) for t, c in _TASK_COLUMN.items() if row[c] != ""}
                records.append({"epoch": int(row["epoch"]), "losses": losses, "total": float(row["loss_total"])})
        return cls(records)


@dataclass
class Batch:
    images: np.ndarray  # [n, H, W, 3] uint8
    targets: TaskTargets


def stack_samples(samples: Sequence[CrowdSample], config: ResnetCrowdConfig) -> Batch:
    """Stack prepared samples (image and heatmap attached) into batch arrays."""
    w, h = config.input_resolution
    hw, hh = config.heatmap_resolution
    for i, s in enumerate(samples):
        if s.image is None or s.image.shape != (h, w, 3):
            got = None if s.image is None else s.image.shape
            raise ValueError(f"sample {i} ({s.image_path}): image must be prepared at {w}x{h}, got {got}")
        if s.heatmap is None or s.heatmap.shape != (1, hh, hw):
            raise ValueError(f"sample {i} ({s.image_path}): heatmap must be prepared at {hw}x{hh}")
    images = np.stack([s.image for s in samples])
    targets = TaskTargets.from_labels(
        fight=[s.fight for s in samples],
        mob=[s.mob for s in samples],
        density_level=[s.density_level for s in samples],
        count=[s.count for s in samples],
        heatmap=np.stack([s.heatmap for s in samples]),
        num_levels=config.num_density_levels,
    )
    return Batch(images, targets)


def _subset(batch: Batch, idx: np.ndarray) -> Batch:
    t = batch.targets
    return Batch(
        batch.images[idx],
        TaskTargets(t.behaviour[idx], t.density_onehot[idx], t.count[idx], t.heatmap[idx]),
    )


def train(model: ResnetCrowdModel, samples: Sequence[CrowdSample], config: TrainConfig) -> tuple[ResnetCrowdModel, TrainHistory]:
    """Optimise ``model`` in place on prepared samples.

    Flipped copies are appended once up front when augmentation is on. Each
    epoch visits the samples in a fresh seeded order; a trailing batch
    smaller than ``batch_size`` is kept. Only the backbone and the heads of
    the enabled tasks are handed to the optimiser, so disabled heads stay
    exactly at their initial values.
    """
    samples = list(samples)
    if config.augment:
        samples = samples + [augment_hflip(s) for s in samples]
    if len(samples) < 2:
        raise ValueError("need at least 2 training samples")
    data = stack_samples(samples, model.config)
    mask = config.tasks
    rng = np.random.default_rng(config.seed)

    params = {name: model.params[name] for name in model.parameter_names(mask.active)}
    optimizer = AdaGrad(
        params,
        lr=config.learning_rate,
        epsilon=config.adagrad_epsilon,
        weight_decay=config.weight_decay,
        decay=[n for n in params if model.is_decayed(n)],
    )
    history = TrainHistory()
    last_checkpoint: Path | None = None
    n = len(samples)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(mask.active, 0.0)
        total_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch = _subset(data, idx)
            optimizer.zero_grads()
            try:
                out = model.forward(normalize_images(batch.images, model.config), "train")
                parts = task_losses(out, batch.targets, mask)
                loss = total_loss(parts, mask)
                loss.backward()
                optimizer.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}, batch {b}: {exc}; last good checkpoint: {last_checkpoint}",
                    epoch, b, last_checkpoint,
                ) from exc
            for task, part in parts.items():
                sums[task] += part.item() * len(idx)
            total_sum += loss.item() * len(idx)
        record = {"epoch": epoch, "losses": {t: v / n for t, v in sums.items()}, "total": total_sum / n}
        history.records.append(record)
        logger.info("epoch %d/%d total loss %.6g", epoch, config.epochs, record["total"])

        due = config.checkpoint_every and epoch % config.checkpoint_every == 0
        if config.checkpoint_dir is not None and (due or epoch == config.epochs):
            last_checkpoint = save_checkpoint(model, Path(config.checkpoint_dir) / f"epoch_{epoch:04d}")
            optimizer.save_state(last_checkpoint)
    return model, history


@dataclass
class FoldRun:
    fold: int
    model: ResnetCrowdModel
    history: TrainHistory
    checkpoint: Path | None = None


def run_ablation_suite(
    samples: Sequence[CrowdSample],
    folds: Sequence[Sequence[int]],
    model_config: ResnetCrowdConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    runs: Sequence[str] | None = None,
) -> dict[str, list[FoldRun]]:
    """Train every canonical run on every fold.

    Fold ``k``'s model is trained on all samples outside ``folds[k]``. All
    runs start from the same seeded initialisation and see the same batch
    order; they differ only in which tasks are trained. With ``out_dir`` set,
    each fold's history and checkpoints land in ``out_dir/<run>/fold_<k>/``.
    """
    runs = list(CANONICAL_RUNS) if runs is None else list(runs)
    unknown = set(runs) - set(CANONICAL_RUNS)
    if unknown:
        raise ValueError(f"unknown run(s) {sorted(unknown)}; choose from {list(CANONICAL_RUNS)}")
    samples = list(samples)
    results: dict[str, list[FoldRun]] = {}
    for run in runs:
        _, mask = CANONICAL_RUNS[run]
        results[run] = []
        for k, held_out in enumerate(folds):
            held = set(held_out)
            train_samples = [s for i, s in enumerate(samples) if i not in held]
            fold_dir = None if out_dir is None else Path(out_dir) / run / f"fold_{k}"
            cfg = replace(train_config, tasks=mask, checkpoint_dir=None if fold_dir is None else fold_dir / "checkpoints")
            logger.info("run %s fold %d: %d training samples", run, k, len(train_samples))
            model, history = train(build_model(model_config), train_samples, cfg)
            checkpoint = None
            if fold_dir is not None:
                history.write_csv(fold_dir / "history.csv")
                checkpoint = save_checkpoint(model, fold_dir / "model")
            results[run].append(FoldRun(k, model, history, checkpoint))
    return results
