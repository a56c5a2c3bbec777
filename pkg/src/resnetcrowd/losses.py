"""Task losses and their masked, unweighted sum.

Each loss is a single differentiable op returning a scalar tensor. Log
arguments are clamped to ``[LOG_CLAMP, 1 - LOG_CLAMP]``; inside the clamped
region the gradient is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autograd import Tensor, add, make_op
from .model import TASKS, ForwardOutput

LOG_CLAMP = 1e-7


@dataclass(frozen=True)
class TaskMask:
    """Which of the four supervised outputs contribute to the total loss."""

    behaviour: bool = True
    density: bool = True
    count_reg: bool = True
    count_heatmap: bool = True

    @classmethod
    def only(cls, *tasks: str) -> "TaskMask":
        unknown = set(tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown task(s) {sorted(unknown)}; expected a subset of {TASKS}")
        return cls(**{t: t in tasks for t in TASKS})

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self) if getattr(self, f.name))

    def to_dict(self) -> dict[str, bool]:
        return {t: getattr(self, t) for t in TASKS}


@dataclass
class TaskTargets:
    """Ground truth for a batch.

    behaviour: ``[N, 2]`` binary (Fight, Mob); density_onehot: ``[N, 5]``;
    count: ``[N]``; heatmap: ``[N, 1, h, w]`` with values in ``[0, 1]``.
    """

    behaviour: np.ndarray
    density_onehot: np.ndarray
    count: np.ndarray
    heatmap: np.ndarray

    def __post_init__(self):
        self.behaviour = np.asarray(self.behaviour, dtype=np.float32)
        self.density_onehot = np.asarray(self.density_onehot, dtype=np.float32)
        self.count = np.asarray(self.count, dtype=np.float32).reshape(-1)
        self.heatmap = np.asarray(self.heatmap, dtype=np.float32)
        if not np.all(np.isin(self.behaviour, (0.0, 1.0))):
            raise ValueError("behaviour targets must be binary")
        if not (np.all(np.isin(self.density_onehot, (0.0, 1.0))) and np.all(self.density_onehot.sum(axis=1) == 1)):
            raise ValueError("density targets must be one-hot rows")
        if np.any(self.count < 0):
            raise ValueError("count targets must be nonnegative")
        if self.heatmap.size and (self.heatmap.min() < 0 or self.heatmap.max() > 1):
            raise ValueError("heatmap targets must lie in [0, 1]")

    @classmethod
    def from_labels(cls, fight, mob, density_level, count, heatmap, num_levels: int = 5) -> "TaskTargets":
        levels = np.asarray(density_level, dtype=int).reshape(-1)
        onehot = np.zeros((levels.size, num_levels), dtype=np.float32)
        onehot[np.arange(levels.size), levels - 1] = 1.0
        behaviour = np.stack([np.asarray(fight, dtype=np.float32), np.asarray(mob, dtype=np.float32)], axis=1)
        return cls(behaviour=behaviour, density_onehot=onehot, count=count, heatmap=heatmap)


def _check_shape(pred: Tensor, target: np.ndarray, name: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{name}: prediction shape {pred.shape} does not match target shape {target.shape}")


def _binary_cross_entropy(pred: Tensor, target: np.ndarray, name: str) -> Tensor:
    _check_shape(pred, target, name)
    p = pred.data.astype(np.float64)
    s = target.astype(np.float64)
    inside = (p > LOG_CLAMP) & (p < 1 - LOG_CLAMP)
    pc = np.clip(p, LOG_CLAMP, 1 - LOG_CLAMP)
    m = p.size
    value = -(s * np.log(pc) + (1 - s) * np.log(1 - pc)).sum() / m

    def grad_fn(g):
        d = -(s / pc - (1 - s) / (1 - pc)) / m * inside
        return ((g * d).astype(pred.dtype),)

    return make_op(np.asarray(value, dtype=pred.dtype), (pred,), grad_fn, name)


def behaviour_loss(pred: Tensor, target) -> Tensor:
    """Binary cross entropy averaged over every (sample, concept) slot."""
    return _binary_cross_entropy(pred, np.asarray(target, dtype=np.float64), "behaviour_loss")


def heatmap_loss(pred: Tensor, target) -> Tensor:
    """Per-pixel binary cross entropy against soft targets, averaged over all pixels."""
    return _binary_cross_entropy(pred, np.asarray(target, dtype=np.float64), "heatmap_loss")


def density_loss(pred: Tensor, target) -> Tensor:
    """Categorical cross entropy over the density levels, averaged over samples."""
    s = np.asarray(target, dtype=np.float64)
    _check_shape(pred, s, "density_loss")
    p = pred.data.astype(np.float64)
    inside = (p > LOG_CLAMP) & (p < 1 - LOG_CLAMP)
    pc = np.clip(p, LOG_CLAMP, 1 - LOG_CLAMP)
    n = p.shape[0]
    value = -(s * np.log(pc)).sum() / n

    def grad_fn(g):
        return ((g * (-s / pc / n * inside)).astype(pred.dtype),)

    return make_op(np.asarray(value, dtype=pred.dtype), (pred,), grad_fn, "density_loss")


def count_reg_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error between predicted and true counts."""
    s = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    p = pred.data.astype(np.float64)
    n = p.shape[0]
    diff = p - s
    value = (diff**2).sum() / n

    def grad_fn(g):
        return ((g * 2.0 * diff / n).astype(pred.dtype),)

    return make_op(np.asarray(value, dtype=pred.dtype), (pred,), grad_fn, "count_reg_loss")


def task_losses(output: ForwardOutput, targets: TaskTargets, mask: TaskMask) -> dict[str, Tensor]:
    """Loss of every task enabled in ``mask``; disabled tasks are not evaluated at all."""
    parts: dict[str, Tensor] = {}
    if mask.behaviour:
        parts["behaviour"] = behaviour_loss(output.behaviour, targets.behaviour)
    if mask.density:
        parts["density"] = density_loss(output.density, targets.density_onehot)
    if mask.count_reg:
        parts["count_reg"] = count_reg_loss(output.count_reg, targets.count.reshape(-1, 1))
    if mask.count_heatmap:
        parts["count_heatmap"] = heatmap_loss(output.heatmap, targets.heatmap)
    return parts


def total_loss(parts: dict[str, Tensor], mask: TaskMask) -> Tensor:
    """Unweighted sum of the losses of enabled tasks.

    Entries of ``parts`` for disabled tasks are ignored, so they contribute
    nothing and receive no gradient.
    """
    active = mask.active
    if not active:
        raise ValueError("total_loss: every task is masked out")
    missing = [t for t in active if t not in parts]
    if missing:
        raise KeyError(f"total_loss: no loss supplied for enabled task(s) {missing}")
    total = parts[active[0]]
    for t in active[1:]:
        total = add(total, parts[t])
    return total
