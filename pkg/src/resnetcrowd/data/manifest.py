"""Dataset manifests and annotated samples.

Manifest JSON layout::

    {"version": 1,
     "resolution": {"w": 640, "h": 360},
     "provenance": "synthetic" | "external",
     "samples": [{"image": "images/0000.png", "heads": [[x, y], ...],
                  "fight": false, "mob": false}, ...]}

Image paths are relative to the manifest's directory. Count and density
level are always derived from the head list; if a record carries them they
must agree with it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .heatmap import HeatmapParams, generate_heatmap
from .images import hflip, load_image, resize_image
from .labels import density_level_from_count

MANIFEST_VERSION = 1
PROVENANCES = ("synthetic", "external")
_SAMPLE_KEYS = {"image", "heads", "fight", "mob"}
_DERIVED_KEYS = {"count", "density_level"}
_TOP_KEYS = {"version", "resolution", "provenance", "samples", "generator"}


class ManifestError(ValueError):
    """A manifest violates the schema; the message names the record and field."""


@dataclass
class CrowdSample:
    image_path: str
    head_points: np.ndarray  # [n, 2] (x, y) in source pixels
    fight: bool
    mob: bool
    source_size: tuple[int, int]  # (w, h) of the annotated image
    image: np.ndarray | None = field(default=None, repr=False)  # [H, W, 3] uint8 at model resolution
    heatmap: np.ndarray | None = field(default=None, repr=False)  # [1, h, w] float32
    heatmap_integral: float | None = None
    flipped: bool = False

    def __post_init__(self):
        self.head_points = np.asarray(self.head_points, dtype=np.float64).reshape(-1, 2)
        self.fight = bool(self.fight)
        self.mob = bool(self.mob)
        self.source_size = (int(self.source_size[0]), int(self.source_size[1]))

    @property
    def count(self) -> int:
        return len(self.head_points)

    @property
    def density_level(self) -> int:
        return density_level_from_count(self.count)

    @property
    def violent(self) -> bool:
        return self.fight or self.mob

    def to_record(self) -> dict:
        heads = [[_plain_number(x), _plain_number(y)] for x, y in self.head_points]
        return {"image": self.image_path, "heads": heads, "fight": self.fight, "mob": self.mob}


def _plain_number(v: float):
    return int(v) if float(v).is_integer() else float(v)


@dataclass
class DatasetManifest:
    samples: list[CrowdSample]
    resolution: tuple[int, int]
    provenance: str = "synthetic"
    root: Path = field(default_factory=Path)
    generator: dict | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def to_dict(self) -> dict:
        d = {
            "version": MANIFEST_VERSION,
            "resolution": {"w": self.resolution[0], "h": self.resolution[1]},
            "provenance": self.provenance,
            "samples": [s.to_record() for s in self.samples],
        }
        if self.generator is not None:
            d["generator"] = self.generator
        return d

    def image_file(self, sample: CrowdSample) -> Path:
        return self.root / sample.image_path


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")
    return path


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ManifestError(f"{where}: {msg}")


def _parse_sample(i: int, rec, resolution: tuple[int, int]) -> CrowdSample:
    where = f"sample {i}"
    _require(isinstance(rec, dict), where, "record must be an object")
    for key in ("image", "heads", "fight", "mob"):
        _require(key in rec, f"{where}, field '{key}'", "missing")
    _require(isinstance(rec["image"], str) and rec["image"], f"{where}, field 'image'", "must be a non-empty string")
    for key in ("fight", "mob"):
        _require(isinstance(rec[key], bool), f"{where}, field '{key}'", "must be true or false")
    heads = rec["heads"]
    _require(isinstance(heads, list), f"{where}, field 'heads'", "must be a list of [x, y] pairs")
    for j, pt in enumerate(heads):
        ok = (isinstance(pt, list) and len(pt) == 2
              and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pt))
        _require(ok, f"{where}, field 'heads'", f"entry {j} is not an [x, y] pair")
        _require(0 <= pt[0] <= resolution[0] - 1 and 0 <= pt[1] <= resolution[1] - 1, f"{where}, field 'heads'",
                 f"entry {j} {pt} lies outside the {resolution[0]}x{resolution[1]} image")
    sample = CrowdSample(rec["image"], np.array(heads, dtype=np.float64), rec["fight"], rec["mob"], resolution)
    if "count" in rec:
        _require(rec["count"] == sample.count, f"{where}, field 'count'",
                 f"{rec['count']} does not match {sample.count} head points")
    if "density_level" in rec:
        _require(rec["density_level"] == sample.density_level, f"{where}, field 'density_level'",
                 f"{rec['density_level']} does not match level {sample.density_level} derived from the count")
    extra = set(rec) - _SAMPLE_KEYS - _DERIVED_KEYS
    if extra:
        warnings.warn(f"{where}: ignoring unknown field(s) {sorted(extra)}", stacklevel=3)
    return sample


def load_manifest(path: str | Path, check_images: bool = False) -> DatasetManifest:
    path = Path(path)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    _require(isinstance(body, dict), str(path), "top level must be an object")
    _require(body.get("version") == MANIFEST_VERSION, "manifest, field 'version'",
             f"expected {MANIFEST_VERSION}, got {body.get('version')!r}")
    res = body.get("resolution")
    _require(isinstance(res, dict) and isinstance(res.get("w"), int) and isinstance(res.get("h"), int)
             and res["w"] > 0 and res["h"] > 0, "manifest, field 'resolution'", "must be {w: int, h: int}")
    _require(body.get("provenance") in PROVENANCES, "manifest, field 'provenance'",
             f"must be one of {PROVENANCES}")
    _require(isinstance(body.get("samples"), list), "manifest, field 'samples'", "must be a list")
    extra = set(body) - _TOP_KEYS
    if extra:
        warnings.warn(f"manifest: ignoring unknown field(s) {sorted(extra)}", stacklevel=2)
    resolution = (res["w"], res["h"])
    samples = [_parse_sample(i, rec, resolution) for i, rec in enumerate(body["samples"])]
    seen: dict[str, int] = {}
    for i, s in enumerate(samples):
        _require(s.image_path not in seen, f"sample {i}, field 'image'",
                 f"duplicate path {s.image_path!r} (also sample {seen.get(s.image_path)})")
        seen[s.image_path] = i
    manifest = DatasetManifest(samples, resolution, body["provenance"], path.parent, body.get("generator"))
    if check_images:
        for i, s in enumerate(samples):
            _require(manifest.image_file(s).is_file(), f"sample {i}, field 'image'",
                     f"{manifest.image_file(s)} does not exist")
    return manifest


def prepare_sample(sample: CrowdSample, root: str | Path, input_size: tuple[int, int],
                   params: HeatmapParams | None = None) -> CrowdSample:
    """Attach the resized image and the ground-truth heatmap at half ``input_size``."""
    image = resize_image(load_image(Path(root) / sample.image_path), input_size)
    return attach_targets(replace(sample, image=image), input_size, params)


def attach_targets(sample: CrowdSample, input_size: tuple[int, int],
                   params: HeatmapParams | None = None) -> CrowdSample:
    target = (input_size[0] // 2, input_size[1] // 2)
    dm = generate_heatmap(sample.head_points, sample.source_size, target, params)
    return replace(sample, heatmap=dm.values, heatmap_integral=dm.integral)


def augment_hflip(sample: CrowdSample) -> CrowdSample:
    """Mirror a sample left-right: image, head x-coordinates and heatmap. Labels are unchanged."""
    pts = sample.head_points.copy()
    pts[:, 0] = sample.source_size[0] - 1 - pts[:, 0]
    return replace(
        sample,
        head_points=pts,
        image=None if sample.image is None else hflip(sample.image),
        heatmap=None if sample.heatmap is None else np.ascontiguousarray(sample.heatmap[..., ::-1]),
        flipped=not sample.flipped,
    )
