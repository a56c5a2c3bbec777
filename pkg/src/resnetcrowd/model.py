"""The ResnetCrowd network: a shallow residual backbone with four task heads.

Backbone: 7x7/2 conv, batch norm, relu, then two basic residual blocks at
64 channels. There is no max pooling, so the feature maps (and the
predicted heatmap) are half the input resolution in each dimension.

Heads, all reading the same 64 backbone maps:

* ``count_heatmap``: 1x1 conv + per-pixel sigmoid
* ``count_reg``: global average pool, linear 64->1, relu
* ``behaviour``: global average pool, linear 64->2, sigmoid (Fight, Mob)
* ``density``: global average pool, linear 64->5, softmax
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .serialization import (
    BundleChecksumError,
    BundleError,
    BundleFormatError,
    BundleShapeError,
    BundleTruncatedError,
    read_bundle,
    write_bundle,
)

TASKS = ("behaviour", "density", "count_reg", "count_heatmap")

# Parameter name prefix owned by each task head.
HEAD_PREFIX = {
    "behaviour": "head_behaviour.",
    "density": "head_density.",
    "count_reg": "head_count.",
    "count_heatmap": "head_heatmap.",
}

BEHAVIOUR_CONCEPTS = ("fight", "mob")

# Parameter count stated for the published network; the layers as described
# add up to fewer parameters (see ``parameter_count``).
REPORTED_PARAMETER_COUNT = 180_934

CheckpointError = BundleError
CheckpointFormatError = BundleFormatError
CheckpointTruncatedError = BundleTruncatedError
CheckpointChecksumError = BundleChecksumError
CheckpointShapeError = BundleShapeError

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ResnetCrowdConfig:
    input_width: int = 320
    input_height: int = 180
    backbone_channels: int = 64
    num_behaviour_concepts: int = 2
    num_density_levels: int = 5
    seed: int = 0
    pixel_mean: tuple[float, float, float] = _IMAGENET_MEAN
    pixel_std: tuple[float, float, float] = _IMAGENET_STD

    def __post_init__(self):
        if self.input_width % 2 or self.input_height % 2:
            raise ValueError(
                f"input resolution must be even in both dimensions, got {self.input_width}x{self.input_height}"
            )
        if min(self.input_width, self.input_height, self.backbone_channels) < 1:
            raise ValueError("input resolution and channel count must be positive")
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)

    @property
    def input_resolution(self) -> tuple[int, int]:
        return (self.input_width, self.input_height)

    @property
    def heatmap_resolution(self) -> tuple[int, int]:
        return (self.input_width // 2, self.input_height // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResnetCrowdConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    heatmap: Tensor  # [N, 1, H/2, W/2], per-pixel probabilities
    count_reg: Tensor  # [N, 1]
    behaviour: Tensor  # [N, 2], Fight then Mob
    density: Tensor  # [N, 5]
    features: Tensor  # [N, 64]

    def heatmap_counts(self) -> np.ndarray:
        """Count estimate per image from integrating the predicted heatmap."""
        return self.heatmap.data.sum(axis=(1, 2, 3), dtype=np.float64)


@dataclass
class ResnetCrowdModel:
    config: ResnetCrowdConfig
    params: dict[str, Tensor]
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in self.bn.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def parameter_names(self, tasks=TASKS) -> list[str]:
        """Backbone parameters plus the heads of ``tasks``."""
        heads = tuple(HEAD_PREFIX.values())
        wanted = tuple(HEAD_PREFIX[t] for t in tasks)
        return [n for n in self.params if not n.startswith(heads) or n.startswith(wanted)]

    def is_decayed(self, name: str) -> bool:
        """Weight decay applies to conv/linear weights only."""
        return name.endswith(".weight")

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays.update(self.buffers())
        return arrays

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, images: Tensor, mode: str = "train") -> ForwardOutput:
        return forward(self, images, mode)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def _xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(config: ResnetCrowdConfig | None = None) -> ResnetCrowdModel:
    """Freshly initialised network.

    Backbone convs use a fan-in scaled Gaussian, the task heads Xavier
    uniform; biases start at zero, batch-norm at the identity.
    """
    config = config or ResnetCrowdConfig()
    rng = np.random.default_rng(config.seed)
    c = config.backbone_channels
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}

    def add_param(name, value):
        params[name] = Tensor(value, requires_grad=True, name=name)

    def add_bn(name):
        state = BatchNormState.fresh(c, name=name)
        bn[name] = state
        params[f"{name}.gamma"] = state.gamma
        params[f"{name}.beta"] = state.beta

    add_param("conv1.weight", _he_normal(rng, (c, 3, 7, 7)))
    add_bn("bn1")
    for block in ("block1", "block2"):
        add_param(f"{block}.conv1.weight", _he_normal(rng, (c, c, 3, 3)))
        add_bn(f"{block}.bn1")
        add_param(f"{block}.conv2.weight", _he_normal(rng, (c, c, 3, 3)))
        add_bn(f"{block}.bn2")

    add_param("head_heatmap.weight", _xavier_uniform(rng, (1, c, 1, 1), c, 1))
    add_param("head_heatmap.bias", np.zeros(1, np.float32))
    for head, k in (
        ("head_count", 1),
        ("head_behaviour", config.num_behaviour_concepts),
        ("head_density", config.num_density_levels),
    ):
        add_param(f"{head}.weight", _xavier_uniform(rng, (c, k), c, k))
        add_param(f"{head}.bias", np.zeros(k, np.float32))
    return ResnetCrowdModel(config=config, params=params, bn=bn)


def _basic_block(model: ResnetCrowdModel, name: str, x: Tensor, mode: str) -> Tensor:
    p = model.params
    y = ag.conv2d(x, p[f"{name}.conv1.weight"], None, stride=1, padding=1)
    y = ag.relu(ag.batch_norm(y, model.bn[f"{name}.bn1"], mode))
    y = ag.conv2d(y, p[f"{name}.conv2.weight"], None, stride=1, padding=1)
    y = ag.batch_norm(y, model.bn[f"{name}.bn2"], mode)
    return ag.relu(ag.add(y, x))


def backbone(model: ResnetCrowdModel, images: Tensor, mode: str = "train") -> Tensor:
    """The shared 64-channel feature maps at half input resolution."""
    cfg = model.config
    expected = (3, cfg.input_height, cfg.input_width)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"expected images of shape [N, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
    p = model.params
    x = ag.conv2d(images, p["conv1.weight"], None, stride=2, padding=3)
    x = ag.relu(ag.batch_norm(x, model.bn["bn1"], mode))
    x = _basic_block(model, "block1", x, mode)
    return _basic_block(model, "block2", x, mode)


def forward(model: ResnetCrowdModel, images: Tensor, mode: str = "train") -> ForwardOutput:
    p = model.params
    maps = backbone(model, images, mode)
    heatmap = ag.sigmoid(ag.conv2d(maps, p["head_heatmap.weight"], p["head_heatmap.bias"]))
    features = ag.global_avg_pool(maps)
    count = ag.relu(ag.linear(features, p["head_count.weight"], p["head_count.bias"]))
    behaviour = ag.sigmoid(ag.linear(features, p["head_behaviour.weight"], p["head_behaviour.bias"]))
    density = ag.softmax(ag.linear(features, p["head_density.weight"], p["head_density.bias"]))
    return ForwardOutput(heatmap=heatmap, count_reg=count, behaviour=behaviour, density=density, features=features)


def normalize_images(images: np.ndarray, config: ResnetCrowdConfig) -> Tensor:
    """8-bit ``[N, H, W, 3]`` RGB batch to a standardised ``[N, 3, H, W]`` tensor."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    x = x / np.float32(255.0)
    mean = np.asarray(config.pixel_mean, dtype=np.float32)
    std = np.asarray(config.pixel_std, dtype=np.float32)
    x = (x - mean) / std
    return Tensor(x.transpose(0, 3, 1, 2))


def parameter_count(model: ResnetCrowdModel) -> int:
    """Trainable scalars: conv/linear weights and biases plus batch-norm gamma/beta.

    For the 64-channel network this is 158,089 (backbone 157,504, heads
    585), short of the 180,934 quoted for the original model; the gap
    cannot be attributed to any described layer.
    """
    return sum(t.size for t in model.params.values())


def save_checkpoint(model: ResnetCrowdModel, path: str | Path) -> Path:
    meta = {
        "kind": "resnetcrowd-checkpoint",
        "config": model.config.to_dict(),
        "parameter_count": parameter_count(model),
        "parameters": list(model.params),
        "buffers": list(model.buffers()),
    }
    return write_bundle(path, model.state_arrays(), meta)


def load_checkpoint(path: str | Path) -> ResnetCrowdModel:
    arrays, meta = read_bundle(path)
    if meta.get("kind") != "resnetcrowd-checkpoint":
        raise CheckpointFormatError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    try:
        config = ResnetCrowdConfig.from_dict(meta["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: invalid config echo ({exc})") from exc
    model = build_model(config)
    expected = model.state_arrays()
    if list(arrays) != list(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointShapeError(f"{path}: tensor names differ from architecture (missing={missing}, extra={extra})")
    for name, arr in arrays.items():
        if arr.shape != expected[name].shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {arr.shape}, architecture needs {expected[name].shape}")
    for name, t in model.params.items():
        t.data = arrays[name].copy()
    for name, state in model.bn.items():
        state.running_mean = arrays[f"{name}.running_mean"].copy()
        state.running_var = arrays[f"{name}.running_var"].copy()
    return model
