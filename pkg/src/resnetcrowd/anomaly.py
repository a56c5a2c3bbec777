"""Outlier scoring of frames from the shared 64-d representation.

Features are pooled backbone activations. A diagonal Gaussian mixture is
fitted to frames known to be normal and every frame is scored by its
negative log-likelihood under that mixture.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .autograd import no_grad
from .data.images import resize_image
from .evaluation import roc_auc
from .model import ResnetCrowdModel, normalize_images

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


class GMMFitError(RuntimeError):
    """EM could not keep every mixture component populated."""


def extract_features(model: ResnetCrowdModel, frames: Sequence[np.ndarray], batch_size: int = 40) -> np.ndarray:
    """Eval-mode pooled features, one 64-d row per uint8 RGB frame.

    Frames of any size are resized to the model's input resolution first.
    """
    size = model.config.input_resolution
    rows = []
    with no_grad():
        for start in range(0, len(frames), batch_size):
            chunk = np.stack([resize_image(np.asarray(f), size) for f in frames[start : start + batch_size]])
            out = model.forward(normalize_images(chunk, model.config), "eval")
            rows.append(out.features.data.astype(np.float64))
    if not rows:
        return np.zeros((0, model.config.backbone_channels))
    return np.concatenate(rows)


@dataclass
class GaussianMixture:
    weights: np.ndarray  # [K], on the simplex
    means: np.ndarray  # [K, D]
    variances: np.ndarray  # [K, D], >= VARIANCE_FLOOR
    log_likelihood: list[float] = field(default_factory=list)  # mean per-sample value after each E-step
    converged: bool = False
    reseeds: int = 0

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_log_prob(self, x: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x | mu_k, diag var_k)`` as an [N, K] array."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff2 = (x[:, None, :] - self.means[None]) ** 2 / self.variances[None]
        log_norm = -0.5 * (x.shape[1] * _LOG_2PI + np.log(self.variances).sum(axis=1))
        return np.log(self.weights)[None] + log_norm[None] - 0.5 * diff2.sum(axis=2)

    def score_samples(self, x: np.ndarray) -> np.ndarray:
        """Log density of each row of ``x`` under the mixture."""
        return logsumexp(self.component_log_prob(x), axis=1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "reseeds": self.reseeds,
        }


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def fit_gmm(
    features: np.ndarray,
    n_components: int = 2,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    variance_floor: float = VARIANCE_FLOOR,
    max_reseeds: int = 5,
) -> GaussianMixture:
    """Diagonal-covariance EM seeded by k-means++.

    Iteration stops once the mean per-sample log-likelihood improves by less
    than ``tol``. A component whose responsibility mass vanishes is moved to
    the worst-explained point; after ``max_reseeds`` such moves
    :class:`GMMFitError` is raised. Between reseeds the log-likelihood is
    checked to be nondecreasing on every iteration.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be [N, D], got shape {x.shape}")
    n, _ = x.shape
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n < 2 * n_components:
        raise ValueError(f"need at least {2 * n_components} samples for {n_components} components, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")

    rng = np.random.default_rng(seed)
    global_var = np.maximum(x.var(axis=0), variance_floor)
    gmm = GaussianMixture(
        weights=np.full(n_components, 1.0 / n_components),
        means=_kmeans_pp(x, n_components, rng),
        variances=np.tile(global_var, (n_components, 1)),
    )
    previous = None
    for _ in range(max_iter):
        # E-step
        log_p = gmm.component_log_prob(x)
        log_total = logsumexp(log_p, axis=1)
        ll = float(log_total.mean())
        if previous is not None and ll < previous - 1e-10 * max(1.0, abs(previous)):
            raise GMMFitError(f"EM log-likelihood decreased from {previous!r} to {ll!r}")
        gmm.log_likelihood.append(ll)
        if previous is not None and ll - previous < tol:
            gmm.converged = True
            break
        previous = ll
        resp = np.exp(log_p - log_total[:, None])

        # M-step
        mass = resp.sum(axis=0)
        empty = mass < 1e-10 * n
        if empty.any():
            if gmm.reseeds + int(empty.sum()) > max_reseeds:
                raise GMMFitError(f"mixture components kept collapsing after {gmm.reseeds} reseeds")
            worst = np.argsort(log_total, kind="stable")
            for j, comp in enumerate(np.flatnonzero(empty)):
                gmm.means[comp] = x[worst[j]]
                gmm.variances[comp] = global_var
                gmm.weights[comp] = 1.0 / n_components
                gmm.reseeds += 1
                logger.warning("re-seeded empty mixture component %d", comp)
            gmm.weights /= gmm.weights.sum()
            previous = None  # reseeding restarts the monotone sequence
            continue
        gmm.weights = mass / n
        gmm.means = (resp.T @ x) / mass[:, None]
        sq = (resp.T @ (x * x)) / mass[:, None] - gmm.means**2
        gmm.variances = np.maximum(sq, variance_floor)
    return gmm


def anomaly_score(gmm: GaussianMixture, features: np.ndarray) -> np.ndarray | float:
    """Negative log-likelihood; higher means more anomalous. A 1-d input yields a float."""
    features = np.asarray(features, dtype=np.float64)
    scores = -gmm.score_samples(features)
    return float(scores[0]) if features.ndim == 1 else scores


def evaluate_anomaly(scores, labels) -> float:
    """ROC AUC with anomalous frames as the positive class."""
    return roc_auc(scores, labels)


def write_scores_csv(path: str | Path, scores, labels=None, frames: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_index", "frame", "score", "label"])
        for i, score in enumerate(np.asarray(scores, dtype=np.float64)):
            writer.writerow([
                i,
                "" if frames is None else frames[i],
                repr(float(score)),
                "" if labels is None else int(bool(labels[i])),
            ])
    return path
