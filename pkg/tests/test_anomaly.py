import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resnetcrowd.anomaly import (
    VARIANCE_FLOOR,
    GaussianMixture,
    GMMFitError,
    anomaly_score,
    evaluate_anomaly,
    extract_features,
    fit_gmm,
    write_scores_csv,
)
from resnetcrowd.autograd import no_grad
from resnetcrowd.model import build_model, normalize_images

from conftest import TINY


def clouds(rng, n=200, dim=8, gap=10.0):
    a = rng.normal(0.0, 1.0, (n, dim))
    b = rng.normal(gap, 1.0, (n, dim))
    return a, b


class TestFit:
    def test_single_component_is_sample_moments(self, rng):
        x = rng.normal(3.0, 2.0, (500, 4))
        g = fit_gmm(x, 1)
        np.testing.assert_allclose(g.means[0], x.mean(axis=0), rtol=1e-10)
        np.testing.assert_allclose(g.variances[0], x.var(axis=0), rtol=1e-10)
        assert g.weights[0] == 1.0

    def test_two_clouds_recover_centroids(self, rng):
        a, b = clouds(rng)
        g = fit_gmm(np.vstack((a, b)), 2, seed=0)
        order = np.argsort(g.means[:, 0])
        np.testing.assert_allclose(g.means[order[0]], a.mean(axis=0), atol=0.1)
        np.testing.assert_allclose(g.means[order[1]], b.mean(axis=0), atol=0.1)
        np.testing.assert_allclose(g.weights, 0.5, atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_log_likelihood_monotone_and_constraints(self, seed, k):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(rng.uniform(-5, 5), rng.uniform(0.2, 2), (30, 5)) for _ in range(3)])
        g = fit_gmm(x, k, seed=seed)
        ll = np.array(g.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-10 * np.abs(ll[:-1]).clip(1))
        assert g.weights.sum() == pytest.approx(1.0)
        assert np.all(g.weights >= 0)
        assert np.all(g.variances >= VARIANCE_FLOOR)

    def test_stops_on_tolerance(self, rng):
        g = fit_gmm(np.vstack(clouds(rng, n=50)), 2)
        assert g.converged
        assert len(g.log_likelihood) < 200

    def test_constant_features_hit_the_floor(self):
        g = fit_gmm(np.ones((10, 3)), 1)
        np.testing.assert_array_equal(g.variances, VARIANCE_FLOOR)
        assert np.isfinite(anomaly_score(g, np.full(3, 1e3)))

    def test_preconditions(self, rng):
        with pytest.raises(ValueError):
            fit_gmm(rng.standard_normal((3, 2)), 2)
        with pytest.raises(ValueError):
            fit_gmm(np.full((6, 2), np.nan), 1)

    def test_stranded_component_is_reseeded(self, rng, monkeypatch):
        import resnetcrowd.anomaly as anomaly

        x = np.vstack(clouds(rng, n=40, dim=2))
        monkeypatch.setattr(anomaly, "_kmeans_pp", lambda x, k, r: np.array([x[0], [1e6, 1e6]]))
        g = fit_gmm(x, 2)
        assert g.reseeds == 1
        assert np.all(g.weights > 0.1)
        with pytest.raises(GMMFitError):
            fit_gmm(x, 2, max_reseeds=0)

    def test_deterministic(self, rng):
        x = np.vstack(clouds(rng, n=40))
        a, b = fit_gmm(x, 2, seed=5), fit_gmm(x, 2, seed=5)
        np.testing.assert_array_equal(a.means, b.means)
        assert a.log_likelihood == b.log_likelihood


class TestScore:
    def unit(self, dim=3):
        return GaussianMixture(np.ones(1), np.zeros((1, dim)), np.ones((1, dim)))

    def test_distance_squared_over_two(self):
        g = self.unit()
        d = np.array([1.0, -2.0, 0.5])
        assert anomaly_score(g, d) - anomaly_score(g, np.zeros(3)) == pytest.approx(np.dot(d, d) / 2, rel=1e-12)

    def test_mean_scores_lower_than_far_point(self, rng):
        g = fit_gmm(np.vstack(clouds(rng)), 2)
        far = np.full(8, 50.0)
        for mean in g.means:
            assert anomaly_score(g, mean) < anomaly_score(g, far)

    def test_batch_shape_and_finite(self, rng):
        g = fit_gmm(np.vstack(clouds(rng, n=30)), 2)
        s = anomaly_score(g, np.full((4, 8), 1e6))
        assert s.shape == (4,) and np.all(np.isfinite(s))

    def test_component_permutation_invariant(self, rng):
        g = fit_gmm(np.vstack(clouds(rng, n=30)), 2)
        swapped = GaussianMixture(g.weights[::-1].copy(), g.means[::-1].copy(), g.variances[::-1].copy())
        pts = rng.normal(5, 5, (20, 8))
        np.testing.assert_allclose(anomaly_score(swapped, pts), anomaly_score(g, pts), rtol=1e-12)


class TestPipeline:
    def test_separable_clusters(self, rng):
        normal, abnormal = clouds(rng, n=150, dim=64, gap=1.5)
        train, test_normal = normal[:100], normal[100:]
        g = fit_gmm(train, 2, seed=0)
        scores = anomaly_score(g, np.vstack((test_normal, abnormal)))
        labels = np.r_[np.zeros(len(test_normal), bool), np.ones(len(abnormal), bool)]
        assert evaluate_anomaly(scores, labels) > 0.9
        shuffled = [evaluate_anomaly(scores, rng.permutation(labels)) for _ in range(20)]
        assert abs(np.mean(shuffled) - 0.5) <= 0.1

    def test_extract_features(self, rng):
        model = build_model(TINY)
        frames = [rng.integers(0, 256, (36, 64, 3), dtype=np.uint8) for _ in range(3)]
        frames.append(frames[0].copy())
        feats = extract_features(model, frames, batch_size=2)
        assert feats.shape == (4, 64)
        np.testing.assert_array_equal(feats[0], feats[3])
        from resnetcrowd.data import resize_image
        with no_grad():
            direct = model.forward(normalize_images(resize_image(frames[1], (32, 18))[None], TINY), "eval").features.data
        np.testing.assert_allclose(feats[1], direct[0], rtol=1e-6)

    def test_scores_csv(self, tmp_path):
        path = write_scores_csv(tmp_path / "s.csv", [0.5, 2.0], [False, True], ["a.png", "b.png"])
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert rows[1] == {"frame_index": "1", "frame": "b.png", "score": "2.0", "label": "1"}
