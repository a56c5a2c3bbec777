"""Flat run configuration shared by every command.

Values are resolved in increasing precedence: built-in defaults, the
desk-scale preset (when ``desk_scale`` is on), a JSON config file, then
command-line flags. Unknown keys in a config file are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .anomaly import VARIANCE_FLOOR
from .data.heatmap import HeatmapParams
from .losses import TaskMask
from .model import ResnetCrowdConfig
from .training import CANONICAL_RUNS, TrainConfig


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


def _opt(default, help: str, **extra):
    factory = {"default_factory": lambda: list(default)} if isinstance(default, list) else {"default": default}
    return field(**factory, metadata={"help": help, **extra})


@dataclass
class RunConfig:
    # model
    input_width: int = _opt(320, "network input width in pixels (even)")
    input_height: int = _opt(180, "network input height in pixels (even)")
    seed: int = _opt(0, "seed for initialisation, batch order, folds and synthetic data")
    # training
    epochs: int = _opt(500, "training epochs per run and fold")
    batch_size: int = _opt(40, "minibatch size")
    learning_rate: float = _opt(0.01, "AdaGrad learning rate")
    adagrad_epsilon: float = _opt(1e-8, "AdaGrad denominator offset")
    weight_decay: float = _opt(1e-4, "L2 coefficient on conv and linear weights")
    augment: bool = _opt(True, "append horizontally flipped copies of the training images")
    checkpoint_every: int = _opt(50, "epochs between checkpoints (0 keeps only the final one)")
    folds: int = _opt(5, "cross-validation folds")
    runs: list = _opt(list(CANONICAL_RUNS), "runs to train", choices=list(CANONICAL_RUNS))
    # heatmap targets
    heatmap_method: str = _opt("adaptive", "head kernel width rule", choices=["adaptive", "fixed"])
    heatmap_k: int = _opt(3, "neighbours for the adaptive kernel width")
    heatmap_beta: float = _opt(0.3, "adaptive kernel width per unit mean neighbour distance")
    heatmap_sigma: float = _opt(4.0, "kernel width for the fixed rule and for scenes with too few heads")
    # synthetic data
    synth_images: int = _opt(100, "number of synthetic scenes")
    synth_violent_fraction: float = _opt(0.5, "fraction of synthetic scenes labelled violent")
    synth_width: int = _opt(640, "synthetic scene width")
    synth_height: int = _opt(360, "synthetic scene height")
    # anomaly
    gmm_components: int = _opt(2, "Gaussian mixture components")
    gmm_max_iter: int = _opt(200, "EM iteration cap")
    gmm_tol: float = _opt(1e-6, "EM stopping threshold on mean log-likelihood gain")
    gmm_variance_floor: float = _opt(VARIANCE_FLOOR, "lower bound on mixture variances")
    # presentation
    colormap: str = _opt("", "matplotlib colormap for heatmap PNGs, e.g. jet (empty for grayscale)")
    desk_scale: bool = _opt(False, "small, fast preset for CPU smoke runs (see DESK_SCALE)")

    def __post_init__(self):
        unknown = set(self.runs) - set(CANONICAL_RUNS)
        if unknown:
            raise ConfigError(f"unknown runs {sorted(unknown)}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        try:
            self.model_config()
            self.train_config()
            self.heatmap_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ResnetCrowdConfig:
        return ResnetCrowdConfig(input_width=self.input_width, input_height=self.input_height, seed=self.seed)

    def train_config(self, tasks: TaskMask | None = None, checkpoint_dir: Path | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            tasks=tasks or TaskMask(),
            learning_rate=self.learning_rate,
            adagrad_epsilon=self.adagrad_epsilon,
            weight_decay=self.weight_decay,
            augment=self.augment,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=checkpoint_dir,
        )

    def heatmap_params(self) -> HeatmapParams:
        return HeatmapParams(method=self.heatmap_method, k=self.heatmap_k, beta=self.heatmap_beta, sigma=self.heatmap_sigma)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# Reduced resolution and epoch budget for CPU runs. The larger step and
# smaller batches compensate for the short schedule: with one batch per
# epoch at the default rate the count-regression term barely moves in 30 epochs.
DESK_SCALE: dict[str, Any] = {
    "input_width": 160,
    "input_height": 90,
    "epochs": 30,
    "batch_size": 10,
    "learning_rate": 0.05,
    "checkpoint_every": 10,
    "synth_images": 20,
}

KEYS = tuple(f.name for f in fields(RunConfig))


def field_help() -> dict[str, tuple[Any, str]]:
    """``key -> (default, help)`` for every configuration key."""
    defaults = RunConfig()
    return {f.name: (getattr(defaults, f.name), f.metadata["help"]) for f in fields(RunConfig)}


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - set(KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s) {unknown}")
    return data


def _check_types(values: dict[str, Any], source: str) -> None:
    types = {f.name: f.type for f in fields(RunConfig)}
    for key, value in values.items():
        expected = types[key]
        ok = {
            "int": isinstance(value, int) and not isinstance(value, bool),
            "float": isinstance(value, (int, float)) and not isinstance(value, bool),
            "bool": isinstance(value, bool),
            "str": isinstance(value, str),
            "list": isinstance(value, list),
        }[expected]
        if not ok:
            raise ConfigError(f"{source}: {key} must be {expected}, got {value!r}")


def resolve_config(file_values: dict[str, Any] | None = None, cli_values: dict[str, Any] | None = None) -> RunConfig:
    """Merge defaults < desk-scale preset < file < command line."""
    file_values = dict(file_values or {})
    cli_values = dict(cli_values or {})
    _check_types(file_values, "config file")
    _check_types(cli_values, "command line")
    desk = cli_values.get("desk_scale", file_values.get("desk_scale", False))
    merged = {**(DESK_SCALE if desk else {}), **file_values, **cli_values}
    for key in ("learning_rate", "adagrad_epsilon", "weight_decay", "heatmap_beta", "heatmap_sigma",
                "synth_violent_fraction", "gmm_tol", "gmm_variance_floor"):
        if key in merged:
            merged[key] = float(merged[key])
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
