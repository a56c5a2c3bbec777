"""Synthetic crowd scenes for exercising the pipeline end to end.

Every person is a dark head disc over a coloured body on a noisy
background. Violent scenes add high-contrast markers on top of a few
people: a red/white checkerboard for Fight, yellow/blue stripes for Mob.
The markers exist only to make the behaviour labels learnable from pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .images import save_image
from .labels import NUM_LEVELS, level_count_range
from .manifest import CrowdSample, DatasetManifest, save_manifest

MARKER_SIZE = 24
_HEAD_RADIUS = 5


@dataclass
class SynthSpec:
    num_images: int = 100
    density_mix: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    violent_fraction: float = 0.5
    seed: int = 0
    width: int = 640
    height: int = 360
    max_count: int = 300  # upper bound for the open top density level
    markers_per_scene: tuple[int, int] = field(default=(3, 6))

    def __post_init__(self):
        self.density_mix = tuple(float(v) for v in self.density_mix)
        self.markers_per_scene = tuple(int(v) for v in self.markers_per_scene)
        if len(self.density_mix) != NUM_LEVELS or min(self.density_mix) < 0 or sum(self.density_mix) <= 0:
            raise ValueError(f"density_mix needs {NUM_LEVELS} nonnegative weights with a positive sum")
        if not 0 <= self.violent_fraction <= 1:
            raise ValueError("violent_fraction must lie in [0, 1]")
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if self.max_count <= level_count_range(NUM_LEVELS)[0]:
            raise ValueError("max_count must exceed the lower bound of the top level")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["density_mix"] = list(self.density_mix)
        d["markers_per_scene"] = list(self.markers_per_scene)
        return d


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``weights`` to integers summing to ``total``."""
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    base = rng.uniform(90, 170, size=3)
    tilt = rng.uniform(-40, 40, size=3)
    ramp = np.linspace(0, 1, h)[:, None, None]
    img = base + tilt * ramp + rng.normal(0, 8, size=(h, w, 3))
    return img


def _draw_person(img: np.ndarray, x: int, y: int, body_color: np.ndarray) -> None:
    h, w = img.shape[:2]
    r = _HEAD_RADIUS
    # body: ellipse below the head
    y0, y1 = max(0, y + r - 1), min(h, y + 4 * r)
    x0, x1 = max(0, x - 2 * r), min(w, x + 2 * r + 1)
    if y0 < y1 and x0 < x1:
        yy, xx = np.mgrid[y0:y1, x0:x1]
        cy = y + 2.5 * r
        mask = ((xx - x) / (1.6 * r)) ** 2 + ((yy - cy) / (1.6 * r)) ** 2 <= 1
        img[y0:y1, x0:x1][mask] = body_color
    y0, y1 = max(0, y - r), min(h, y + r + 1)
    x0, x1 = max(0, x - r), min(w, x + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    img[y0:y1, x0:x1][(xx - x) ** 2 + (yy - y) ** 2 <= r * r] = (30, 24, 20)


def _draw_marker(img: np.ndarray, x: int, y: int, kind: str) -> None:
    h, w = img.shape[:2]
    half = MARKER_SIZE // 2
    y0, y1 = max(0, y - half), min(h, y + half)
    x0, x1 = max(0, x - half), min(w, x + half)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    if kind == "fight":
        on = ((yy // 6) + (xx // 6)) % 2 == 0
        img[y0:y1, x0:x1] = np.where(on[..., None], (230, 20, 20), (255, 255, 255))
    else:
        on = (yy // 4) % 2 == 0
        img[y0:y1, x0:x1] = np.where(on[..., None], (250, 230, 0), (10, 30, 200))


def render_scene(rng: np.random.Generator, spec: SynthSpec, heads: np.ndarray, fight: bool, mob: bool) -> np.ndarray:
    img = _background(rng, spec.width, spec.height)
    palette = rng.uniform(40, 230, size=(max(1, len(heads)), 3))
    order = np.argsort(heads[:, 1], kind="stable") if len(heads) else []
    for i in order:
        _draw_person(img, int(heads[i, 0]), int(heads[i, 1]), palette[i])
    kinds = [k for k, on in (("fight", fight), ("mob", mob)) if on]
    for kind in kinds:
        n_markers = int(rng.integers(spec.markers_per_scene[0], spec.markers_per_scene[1] + 1))
        if len(heads):
            chosen = heads[rng.choice(len(heads), size=min(n_markers, len(heads)), replace=False)]
        else:
            chosen = np.column_stack((rng.integers(0, spec.width, n_markers), rng.integers(0, spec.height, n_markers)))
        for x, y in chosen:
            _draw_marker(img, int(x), int(y) + 2 * _HEAD_RADIUS, kind)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(spec: SynthSpec, output_dir: str | Path) -> DatasetManifest:
    """Render ``spec.num_images`` scenes into ``output_dir/images`` and write ``output_dir/manifest.json``."""
    output_dir = Path(output_dir)
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    per_level = _allocate(np.asarray(spec.density_mix), spec.num_images)
    levels = rng.permutation(np.repeat(np.arange(1, NUM_LEVELS + 1), per_level))
    n_violent = int(round(spec.violent_fraction * spec.num_images))
    violent = np.zeros(spec.num_images, dtype=bool)
    violent[rng.permutation(spec.num_images)[:n_violent]] = True

    samples = []
    for i in range(spec.num_images):
        lo, hi = level_count_range(int(levels[i]))
        count = int(rng.integers(lo, (spec.max_count if hi is None else hi) + 1))
        heads = np.column_stack(
            (rng.integers(0, spec.width, size=count), rng.integers(0, spec.height, size=count))
        ).astype(np.float64)
        fight = mob = False
        if violent[i]:
            combo = int(rng.integers(3))
            fight, mob = combo in (0, 2), combo in (1, 2)
        image = render_scene(rng, spec, heads, fight, mob)
        rel = f"images/{i:04d}.png"
        save_image(image, output_dir / rel)
        samples.append(CrowdSample(rel, heads, fight, mob, (spec.width, spec.height)))

    manifest = DatasetManifest(samples, (spec.width, spec.height), "synthetic", output_dir, {"synth": spec.to_dict()})
    save_manifest(manifest, output_dir / "manifest.json")
    return manifest
