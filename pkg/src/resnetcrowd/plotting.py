"""Figures written next to the delimited reports.

Everything goes through ``Figure`` and the Agg canvas directly, so no
global pyplot state or display backend is involved.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
from matplotlib import colormaps
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from PIL import Image

from .model import TASKS

if TYPE_CHECKING:
    from .training import TrainHistory

_TASK_TITLES = {
    "behaviour": "Behaviour (BCE)",
    "density": "Density level (CCE)",
    "count_reg": "Regression count (MSE)",
    "count_heatmap": "Heatmap (BCE)",
}
# Fixed metadata keeps PNG bytes independent of the matplotlib version.
_PNG_METADATA = {"Software": None}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    return path


def plot_loss_curves(histories: Mapping[str, TrainHistory], path: str | Path) -> Path:
    """One panel per loss term plus the total, one line per labelled history, log-scaled."""
    fig = Figure(figsize=(11, 6), layout="constrained")
    axes = fig.subplots(2, 3).ravel()
    panels = [*TASKS, "total"]
    for ax, panel in zip(axes, panels):
        for label, history in histories.items():
            epochs = [r["epoch"] for r in history.records]
            values = [r["total"] if panel == "total" else r["losses"].get(panel) for r in history.records]
            if all(v is None for v in values):
                continue
            ax.plot(epochs, [np.nan if v is None else v for v in values], label=label, linewidth=1.2)
        ax.set_title(_TASK_TITLES.get(panel, "Total"), fontsize=10)
        ax.set_xlabel("epoch")
        if ax.lines:
            ax.set_yscale("log")
        else:
            ax.text(0.5, 0.5, "not trained", ha="center", va="center", transform=ax.transAxes, color="0.5")
    axes[-1].axis("off")
    handles, labels = axes[len(panels) - 1].get_legend_handles_labels()
    if handles:
        axes[-1].legend(handles, labels, loc="center", fontsize=9, frameon=False)
    return _save(fig, path)


def plot_roc_curves(curves: Mapping[str, tuple[np.ndarray, np.ndarray, float]], path: str | Path, title: str = "ROC") -> Path:
    """``curves`` maps a label to ``(fpr, tpr, auc)``."""
    fig = Figure(figsize=(5, 5), layout="constrained")
    ax = fig.subplots()
    ax.plot([0, 1], [0, 1], linestyle=":", color="0.6", linewidth=1)
    for label, (fpr, tpr, auc) in curves.items():
        ax.step(fpr, tpr, where="post", label=f"{label} (AUC {auc:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_banded_mae(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> Path:
    """Grouped bars of banded MAE, one group per band; missing cells are left empty."""
    fig = Figure(figsize=(8, 4.5), layout="constrained")
    ax = fig.subplots()
    width = 0.8 / max(1, len(rows))
    x = np.arange(len(columns))
    for i, row in enumerate(rows):
        heights = [np.nan if row[c] is None else row[c] for c in columns]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, heights, width, label=row["run"])
    ax.set_xticks(x, [c.replace(" MAE", "") for c in columns])
    ax.set_ylabel("MAE (people)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def heatmap_to_image(heatmap: np.ndarray, colormap: str | None = None) -> np.ndarray:
    """Scale a 2-d map to [0, 255] by its maximum; grayscale unless a matplotlib colormap is named."""
    hm = np.asarray(heatmap, dtype=np.float64)
    hm = np.squeeze(hm)
    if hm.ndim != 2:
        raise ValueError(f"heatmap must be 2-d after squeezing, got shape {hm.shape}")
    peak = hm.max()
    scaled = np.clip(hm / peak, 0.0, 1.0) if peak > 0 else np.zeros_like(hm)
    if colormap is None:
        return np.rint(scaled * 255).astype(np.uint8)
    rgba = colormaps[colormap](scaled)
    return np.rint(rgba[..., :3] * 255).astype(np.uint8)


def save_heatmap_png(heatmap: np.ndarray, path: str | Path, colormap: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_to_image(heatmap, colormap)).save(path, format="PNG")
    return path
