"""Finite-difference suites over every op the network uses and over the whole model.

Layer cases run in float64 on small random inputs, each reduced to a
scalar through a fixed random projection so every output element carries
a distinct weight. The full-model case promotes a reduced-resolution
network to float64 and differentiates the summed multi-task loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, CheckReport, Tensor, finite_diff_check
from .losses import (
    TaskMask,
    TaskTargets,
    behaviour_loss,
    count_reg_loss,
    density_loss,
    heatmap_loss,
    task_losses,
    total_loss,
)
from .model import ResnetCrowdConfig, build_model, normalize_images

LAYER_TOLERANCE = 1e-3
MODEL_TOLERANCE = 1e-2


@dataclass
class CaseResult:
    name: str
    report: CheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng: np.random.Generator, *shape: int, low: float | None = None, name: str | None = None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(data, dtype=np.float64, name=name)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return lambda y: ag.tensor_sum(ag.mul(y, weights))


def _case(build: Callable[..., Tensor], inputs: dict[str, Tensor], rng: np.random.Generator):
    with ag.no_grad():
        reduce = _project(build(**inputs), rng)
    return (lambda: reduce(build(**inputs))), inputs


def layer_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """Named ``(graph_builder, inputs)`` pairs, one per layer type."""
    rng = np.random.default_rng(seed)
    cases = {}

    def bn(mode):
        state = BatchNormState.fresh(3)
        state.running_mean = rng.standard_normal(3).astype(np.float32)
        state.running_var = rng.uniform(0.5, 2.0, 3).astype(np.float32)

        def build(x, gamma, beta):
            state.gamma, state.beta = gamma, beta
            return ag.batch_norm(x, state, mode)

        return build, {"x": _t(rng, 4, 3, 5, 4), "gamma": _t(rng, 3), "beta": _t(rng, 3)}

    cases["conv2d_7x7_stride2"] = _case(
        lambda x, w: ag.conv2d(x, w, stride=2, padding=3),
        {"x": _t(rng, 2, 3, 11, 9), "w": _t(rng, 4, 3, 7, 7)}, rng)
    cases["conv2d_3x3"] = _case(
        lambda x, w: ag.conv2d(x, w, stride=1, padding=1),
        {"x": _t(rng, 2, 4, 6, 5), "w": _t(rng, 3, 4, 3, 3)}, rng)
    cases["conv2d_1x1_bias"] = _case(
        lambda x, w, b: ag.conv2d(x, w, b),
        {"x": _t(rng, 2, 5, 4, 3), "w": _t(rng, 1, 5, 1, 1), "b": _t(rng, 1)}, rng)
    cases["batch_norm_train"] = _case(*bn("train"), rng)
    cases["batch_norm_eval"] = _case(*bn("eval"), rng)
    cases["relu"] = _case(ag.relu, {"x": _t(rng, 3, 7, low=0.05)}, rng)
    cases["sigmoid"] = _case(ag.sigmoid, {"x": _t(rng, 3, 7)}, rng)
    cases["softmax"] = _case(ag.softmax, {"x": _t(rng, 4, 5)}, rng)
    cases["global_avg_pool"] = _case(ag.global_avg_pool, {"x": _t(rng, 2, 3, 4, 5)}, rng)
    cases["linear"] = _case(ag.linear, {"x": _t(rng, 4, 6), "weight": _t(rng, 6, 3), "bias": _t(rng, 3)}, rng)
    cases["add"] = _case(ag.add, {"a": _t(rng, 2, 3, 4), "b": _t(rng, 2, 3, 4)}, rng)
    cases["mul"] = _case(ag.mul, {"a": _t(rng, 2, 3, 4), "b": _t(rng, 2, 3, 4)}, rng)

    def loss_case(loss, activation, z, target):
        return (lambda: loss(activation(z), target)), {"z": z}

    identity = lambda z: z
    cases["loss_behaviour"] = loss_case(
        behaviour_loss, ag.sigmoid, _t(rng, 5, 2), rng.integers(0, 2, (5, 2)).astype(np.float64))
    cases["loss_heatmap"] = loss_case(
        heatmap_loss, ag.sigmoid, _t(rng, 2, 1, 4, 5), rng.uniform(0, 0.05, (2, 1, 4, 5)))
    cases["loss_density"] = loss_case(
        density_loss, ag.softmax, _t(rng, 6, 5), np.eye(5)[rng.integers(0, 5, 6)])
    cases["loss_count_reg"] = loss_case(
        count_reg_loss, identity, Tensor(rng.uniform(0, 60, (4, 1)), dtype=np.float64), rng.uniform(0, 60, (4, 1)))
    return cases


def run_layer_checks(seed: int = 0, tol: float = LAYER_TOLERANCE) -> list[CaseResult]:
    results = []
    for name, (build, inputs) in layer_cases(seed).items():
        start = time.perf_counter()
        report = finite_diff_check(build, inputs, epsilon=1e-4 if name.startswith("loss") else 1e-3, tol=tol, max_entries=24, seed=seed)
        results.append(CaseResult(name, report, time.perf_counter() - start))
    return results


def full_model_case(seed: int = 0, width: int = 32, height: int = 18, batch: int = 2):
    """The complete network at reduced resolution in float64 with all four losses active."""
    rng = np.random.default_rng(seed)
    config = ResnetCrowdConfig(input_width=width, input_height=height, seed=seed)
    model = build_model(config)
    for name, t in model.params.items():
        t.data = t.data.astype(np.float64)
        t.name = name
    for state in model.bn.values():
        state.running_mean = state.running_mean.astype(np.float64)
        state.running_var = state.running_var.astype(np.float64)
    images = normalize_images(rng.integers(0, 256, (batch, height, width, 3), dtype=np.uint8), config)
    images = Tensor(images.data, dtype=np.float64)
    hw, hh = config.heatmap_resolution
    targets = TaskTargets.from_labels(
        fight=rng.integers(0, 2, batch).astype(bool),
        mob=rng.integers(0, 2, batch).astype(bool),
        density_level=rng.integers(1, 6, batch),
        count=rng.integers(0, 30, batch),
        heatmap=rng.uniform(0, 0.05, (batch, 1, hh, hw)),
    )
    mask = TaskMask()

    def build():
        return total_loss(task_losses(model.forward(images, "train"), targets, mask), mask)

    return build, dict(model.params)


def run_model_check(seed: int = 0, tol: float = MODEL_TOLERANCE, max_entries: int = 6) -> CaseResult:
    """A step of 1e-6 keeps ReLU sign flips out of the stencil, which dominate at larger steps."""
    build, inputs = full_model_case(seed)
    start = time.perf_counter()
    report = finite_diff_check(build, inputs, epsilon=1e-6, tol=tol, max_entries=max_entries, seed=seed)
    return CaseResult("full_model", report, time.perf_counter() - start)
