"""Metrics, cross-validated reports and their table/JSON/CSV renderings.

"MSE" in counting reports follows the crowd-counting convention of the
root of the mean squared error; reports label it accordingly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import no_grad
from .data.manifest import CrowdSample
from .losses import TaskMask
from .model import BEHAVIOUR_CONCEPTS, ResnetCrowdModel, normalize_images

# (name, lower bound exclusive except for the first band, upper bound inclusive)
COUNT_BANDS = (("low", 0.0, 50.0), ("medium", 50.0, 150.0), ("high", 150.0, math.inf))

MSE_NOTE = "count MSE columns hold the root of the mean squared error, as in the crowd-counting literature"


class UndefinedMetric(ValueError):
    """The metric is undefined for the given input (e.g. AUC with one class)."""


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates swept over every distinct score threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration over the threshold sweep.

    Tied scores form one diagonal step, so this equals the probability that a
    random positive outscores a random negative, counting ties as one half.
    """
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def mean_auc(aucs) -> float:
    aucs = [a for a in aucs]
    if not aucs:
        raise ValueError("mean_auc needs at least one AUC")
    return float(np.mean(aucs))


@dataclass
class CountingMetrics:
    mae: float
    mse: float  # root of mean squared error
    band_mae: dict[str, float | None]
    band_sizes: dict[str, int]


def count_band(count: float) -> str:
    for name, lo, hi in COUNT_BANDS:
        if (count >= lo if name == "low" else count > lo) and count <= hi:
            return name
    raise ValueError(f"negative count {count}")


def counting_metrics(pred_counts, true_counts) -> CountingMetrics:
    """MAE, root-MSE and MAE per congestion band (bands keyed by the true count)."""
    pred = np.asarray(pred_counts, dtype=np.float64).reshape(-1)
    true = np.asarray(true_counts, dtype=np.float64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError("predicted and true counts differ in length")
    if pred.size == 0:
        raise ValueError("counting_metrics needs at least one sample")
    err = np.abs(pred - true)
    bands = np.array([count_band(c) for c in true])
    band_mae, band_sizes = {}, {}
    for name, _, _ in COUNT_BANDS:
        sel = bands == name
        band_sizes[name] = int(sel.sum())
        band_mae[name] = float(err[sel].mean()) if sel.any() else None
    return CountingMetrics(
        mae=float(err.mean()),
        mse=float(np.sqrt(np.mean((pred - true) ** 2))),
        band_mae=band_mae,
        band_sizes=band_sizes,
    )


def density_accuracy(pred_levels, true_levels) -> float:
    pred = np.asarray(pred_levels).reshape(-1)
    true = np.asarray(true_levels).reshape(-1)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("density_accuracy needs equal-length, non-empty inputs")
    return float(np.mean(pred == true))


# ---------------------------------------------------------------------------
# model predictions
# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    behaviour: np.ndarray  # [N, 2]
    density: np.ndarray  # [N, 5]
    count_reg: np.ndarray  # [N]
    heatmap_count: np.ndarray  # [N]

    @property
    def density_level(self) -> np.ndarray:
        return self.density.argmax(axis=1) + 1


def predict(model: ResnetCrowdModel, samples: Sequence[CrowdSample], batch_size: int = 40) -> Predictions:
    """Eval-mode forward over prepared samples."""
    parts = {"behaviour": [], "density": [], "count_reg": [], "heatmap_count": []}
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = normalize_images(np.stack([s.image for s in chunk]), model.config)
            out = model.forward(images, "eval")
            parts["behaviour"].append(out.behaviour.data.astype(np.float64))
            parts["density"].append(out.density.data.astype(np.float64))
            parts["count_reg"].append(out.count_reg.data[:, 0].astype(np.float64))
            parts["heatmap_count"].append(out.heatmap_counts())
    return Predictions(**{k: np.concatenate(v) for k, v in parts.items()})


METRIC_KEYS = (
    "fight_auc", "mob_auc", "behaviour_mauc", "density_accuracy",
    "count_reg_mae", "count_reg_mse", "count_heatmap_mae", "count_heatmap_mse",
    "count_reg_mae_low", "count_reg_mae_medium", "count_reg_mae_high",
    "count_heatmap_mae_low", "count_heatmap_mae_medium", "count_heatmap_mae_high",
)


def fold_metrics(pred: Predictions, samples: Sequence[CrowdSample], tasks: TaskMask) -> dict[str, float | None]:
    """Metrics of one held-out fold; tasks that were not trained are None."""
    m: dict[str, float | None] = dict.fromkeys(METRIC_KEYS)
    if tasks.behaviour:
        aucs = []
        for j, concept in enumerate(BEHAVIOUR_CONCEPTS):
            labels = [getattr(s, concept) for s in samples]
            try:
                m[f"{concept}_auc"] = roc_auc(pred.behaviour[:, j], labels)
                aucs.append(m[f"{concept}_auc"])
            except UndefinedMetric:
                pass
        m["behaviour_mauc"] = mean_auc(aucs) if aucs else None
    if tasks.density:
        m["density_accuracy"] = density_accuracy(pred.density_level, [s.density_level for s in samples])
    true_counts = [s.count for s in samples]
    for task, values in (("count_reg", pred.count_reg), ("count_heatmap", pred.heatmap_count)):
        if getattr(tasks, task):
            cm = counting_metrics(values, true_counts)
            m[f"{task}_mae"] = cm.mae
            m[f"{task}_mse"] = cm.mse
            for band, v in cm.band_mae.items():
                m[f"{task}_mae_{band}"] = v
    return m


def _nanmean(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    run: str
    label: str
    tasks: TaskMask
    per_fold: list[dict[str, float | None]]
    mean: dict[str, float | None]
    predictions: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "run": self.run,
            "label": self.label,
            "tasks": self.tasks.to_dict(),
            "mean": self.mean,
            "per_fold": self.per_fold,
        }


def cross_validate(
    models: Sequence[ResnetCrowdModel],
    folds: Sequence[Sequence[int]],
    samples: Sequence[CrowdSample],
    tasks: TaskMask,
    run: str = "resnetcrowd",
    label: str | None = None,
) -> MetricsReport:
    """Evaluate fold ``k``'s model on held-out fold ``k`` and average metrics over folds.

    Behaviour AUC is averaged over concepts within each fold, then over folds.
    """
    if len(models) != len(folds):
        raise ValueError(f"{len(models)} models for {len(folds)} folds")
    per_fold, rows = [], []
    for k, (model, held_out) in enumerate(zip(models, folds)):
        fold_samples = [samples[i] for i in held_out]
        pred = predict(model, fold_samples)
        per_fold.append(fold_metrics(pred, fold_samples, tasks))
        for j, (i, s) in enumerate(zip(held_out, fold_samples)):
            rows.append({
                "run": run, "fold": k, "sample": i, "image": s.image_path,
                "true_count": s.count, "true_level": s.density_level,
                "fight": int(s.fight), "mob": int(s.mob),
                "count_reg": float(pred.count_reg[j]) if tasks.count_reg else None,
                "heatmap_count": float(pred.heatmap_count[j]) if tasks.count_heatmap else None,
                "pred_level": int(pred.density_level[j]) if tasks.density else None,
                "p_fight": float(pred.behaviour[j, 0]) if tasks.behaviour else None,
                "p_mob": float(pred.behaviour[j, 1]) if tasks.behaviour else None,
            })
    mean = {key: _nanmean([f[key] for f in per_fold]) for key in METRIC_KEYS}
    return MetricsReport(run, label or run, tasks, per_fold, mean, rows)


# ---------------------------------------------------------------------------
# renderings
# ---------------------------------------------------------------------------

TASK_COLUMNS = (
    ("Behaviour: mAUC", "behaviour_mauc"),
    ("Density: Accuracy", "density_accuracy"),
    ("Regression Counting: MAE", "count_reg_mae"),
    ("Heatmap Counting: MAE", "count_heatmap_mae"),
)
BAND_COLUMNS = ("Low Congestion MAE", "Medium Congestion MAE", "High Congestion MAE")


def task_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    return [{"run": r.label, **{col: r.mean[key] for col, key in TASK_COLUMNS}} for r in reports]


def band_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    rows = []
    for r in reports:
        both = r.tasks.count_reg and r.tasks.count_heatmap
        for task, suffix in (("count_reg", "Regression Counting"), ("count_heatmap", "Heatmap Counting")):
            if not getattr(r.tasks, task):
                continue
            label = f"{r.label}: {suffix}" if both else r.label
            rows.append({
                "run": label,
                **{col: r.mean[f"{task}_mae_{band}"] for col, (band, _, _) in zip(BAND_COLUMNS, COUNT_BANDS)},
            })
    return rows


def _cell(v) -> str:
    if v is None:
        return "N/A"
    return f"{v:.3f}" if abs(v) < 10 else f"{v:.1f}"


def format_table(rows: list[dict], columns: Sequence[str]) -> str:
    header = ["Run", *columns]
    body = [[row["run"], *(_cell(row[c]) for c in columns)] for row in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda line: "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths)))
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(header), rule, *(fmt(line) for line in body)]) + "\n"


def render_text_report(reports: Sequence[MetricsReport]) -> str:
    parts = [
        "Multi- vs single-task performance (mean over folds)",
        format_table(task_rows(reports), [c for c, _ in TASK_COLUMNS]),
    ]
    bands = band_rows(reports)
    if bands:
        parts += ["Counting MAE by congestion band (low 0-50, medium 51-150, high 151+)", format_table(bands, BAND_COLUMNS)]
    parts.append(f"Note: {MSE_NOTE}.\n")
    return "\n".join(parts)


def report_json(reports: Sequence[MetricsReport], extra: dict | None = None) -> dict:
    body = {
        "task_table": task_rows(reports),
        "band_table": band_rows(reports),
        "runs": {r.run: r.to_dict() for r in reports},
        "notes": {"mse": MSE_NOTE, "bands": {name: [lo, None if math.isinf(hi) else hi] for name, lo, hi in COUNT_BANDS}},
    }
    if extra:
        body.update(extra)
    return body


PREDICTION_COLUMNS = (
    "run", "fold", "sample", "image", "true_count", "count_reg", "heatmap_count",
    "true_level", "pred_level", "fight", "p_fight", "mob", "p_mob",
)


def write_reports(reports: Sequence[MetricsReport], out_dir: str | Path, extra: dict | None = None) -> dict[str, Path]:
    """Write ``report.json``, ``report.txt`` and ``predictions.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "report.json", "text": out_dir / "report.txt", "predictions": out_dir / "predictions.csv"}
    paths["json"].write_text(json.dumps(report_json(reports, extra), indent=2) + "\n", encoding="utf-8")
    paths["text"].write_text(render_text_report(reports), encoding="utf-8")
    with paths["predictions"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PREDICTION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            for row in r.predictions:
                writer.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return paths
