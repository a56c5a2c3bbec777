"""AdaGrad with an additive L2 weight penalty."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from .autograd import NonFiniteError, Tensor
from .serialization import read_bundle, write_bundle


class AdaGrad:
    """Per-element AdaGrad.

    For each parameter ``w`` with gradient ``g``::

        g' = g + weight_decay * w      (only for parameters flagged for decay)
        acc += g'**2
        w -= lr * g' / (sqrt(acc) + epsilon)

    A missing gradient counts as zero, so a step with no backward pass is a
    pure decay step. Arithmetic happens in each parameter's own dtype.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01, epsilon: float = 1e-8,
                 weight_decay: float = 1e-4, decay: Iterable[str] | None = None):
        if lr <= 0 or epsilon <= 0 or weight_decay < 0:
            raise ValueError("lr and epsilon must be positive, weight_decay nonnegative")
        self.params = dict(params)
        self.lr = lr
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.decay = set(self.params if decay is None else decay)
        self.accumulators = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.steps = 0

    def step(self) -> None:
        effective = {}
        for name, t in self.params.items():
            g = np.zeros_like(t.data) if t.grad is None else t.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {name}; step aborted")
            if self.weight_decay and name in self.decay:
                g = g + t.data.dtype.type(self.weight_decay) * t.data
            effective[name] = g
        for name, t in self.params.items():
            g = effective[name]
            acc = self.accumulators[name]
            acc += g * g
            t.data = t.data - t.data.dtype.type(self.lr) * g / (np.sqrt(acc) + t.data.dtype.type(self.epsilon))
        self.steps += 1

    def zero_grads(self) -> None:
        zero_grads(self.params.values())

    def save_state(self, path: str | Path) -> Path:
        meta = {
            "kind": "adagrad-state",
            "lr": self.lr,
            "epsilon": self.epsilon,
            "weight_decay": self.weight_decay,
            "steps": self.steps,
            "decay": sorted(self.decay),
        }
        return write_bundle(path, self.accumulators, meta, manifest_name="optimizer.json", blob_name="optimizer.bin")

    def load_state(self, path: str | Path) -> None:
        arrays, meta = read_bundle(path, manifest_name="optimizer.json", blob_name="optimizer.bin")
        if set(arrays) != set(self.accumulators):
            raise ValueError("optimizer state does not match the parameter set")
        for name, arr in arrays.items():
            if arr.shape != self.accumulators[name].shape:
                raise ValueError(f"optimizer state for {name} has shape {arr.shape}")
            self.accumulators[name] = arr.astype(self.accumulators[name].dtype)
        self.lr, self.epsilon, self.weight_decay = meta["lr"], meta["epsilon"], meta["weight_decay"]
        self.steps = meta["steps"]
        self.decay = set(meta["decay"])


def zero_grads(params: Iterable[Tensor]) -> None:
    for t in params:
        t.zero_grad()
