"""Dataset schema, ground-truth construction and synthetic scenes."""

from .folds import stratified_folds
from .heatmap import DensityMap, HeatmapParams, generate_heatmap
from .images import hflip, load_image, resize_image, save_image
from .labels import NUM_LEVELS, density_level_from_count, level_count_range
from .manifest import (
    CrowdSample,
    DatasetManifest,
    ManifestError,
    attach_targets,
    augment_hflip,
    load_manifest,
    prepare_sample,
    save_manifest,
)
from .synth import SynthSpec, synth_generate

__all__ = [
    "CrowdSample",
    "DatasetManifest",
    "DensityMap",
    "HeatmapParams",
    "ManifestError",
    "NUM_LEVELS",
    "SynthSpec",
    "attach_targets",
    "augment_hflip",
    "density_level_from_count",
    "generate_heatmap",
    "hflip",
    "level_count_range",
    "load_image",
    "load_manifest",
    "prepare_sample",
    "resize_image",
    "save_image",
    "save_manifest",
    "stratified_folds",
    "synth_generate",
]
