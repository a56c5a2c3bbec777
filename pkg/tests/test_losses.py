import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resnetcrowd import autograd as ag
from resnetcrowd.autograd import Tensor
from resnetcrowd.losses import (
    LOG_CLAMP,
    TaskMask,
    TaskTargets,
    behaviour_loss,
    count_reg_loss,
    density_loss,
    heatmap_loss,
    task_losses,
    total_loss,
)
from resnetcrowd.model import build_model, normalize_images

from conftest import TINY


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64, requires_grad=grad)


class TestValues:
    def test_behaviour_examples(self):
        assert behaviour_loss(t64([[1.0, 0.0]]), [[1.0, 0.0]]).item() == pytest.approx(0.0, abs=1e-6)
        assert behaviour_loss(t64([[0.5, 0.5]]), [[1.0, 1.0]]).item() == pytest.approx(math.log(2))
        assert behaviour_loss(t64([[0.9, 0.1]]), [[1.0, 0.0]]).item() == pytest.approx(-math.log(0.9), rel=1e-9)

    def test_density_examples(self):
        onehot = np.eye(5)[[2]]
        assert density_loss(t64(np.full((1, 5), 0.2)), onehot).item() == pytest.approx(math.log(5))
        p = np.array([[0.1, 0.1, 0.5, 0.2, 0.1]])
        assert density_loss(t64(p), onehot).item() == pytest.approx(math.log(2))
        assert density_loss(t64(onehot), onehot).item() == pytest.approx(0.0, abs=1e-6)

    def test_count_examples(self):
        assert count_reg_loss(t64([[12.0], [16.0]]), [[10.0], [20.0]]).item() == 10.0
        assert count_reg_loss(t64([[3.0]]), [[3.0]]).item() == 0.0
        assert count_reg_loss(t64([[7.5]]), [[3.0]]).item() == pytest.approx(4.5**2)

    def test_heatmap_examples(self):
        shape = (2, 1, 3, 4)
        assert heatmap_loss(t64(np.full(shape, 0.5)), np.full(shape, 0.5)).item() == pytest.approx(math.log(2))
        assert heatmap_loss(t64(np.full(shape, 0.5)), np.zeros(shape)).item() == pytest.approx(math.log(2))
        assert heatmap_loss(t64(np.full(shape, 1e-9)), np.zeros(shape)).item() == pytest.approx(0.0, abs=1e-6)

    def test_clamp_keeps_saturated_predictions_finite(self):
        value = behaviour_loss(t64([[0.0, 1.0]]), [[1.0, 0.0]]).item()
        assert value == pytest.approx(-math.log(LOG_CLAMP), rel=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            count_reg_loss(t64([[1.0], [2.0]]), [[1.0]])


class TestTargets:
    def test_from_labels(self):
        t = TaskTargets.from_labels([True, False], [False, False], [1, 5], [3, 250], np.zeros((2, 1, 2, 2)))
        np.testing.assert_array_equal(t.behaviour, [[1, 0], [0, 0]])
        np.testing.assert_array_equal(t.density_onehot.argmax(axis=1), [0, 4])
        np.testing.assert_array_equal(t.count, [3, 250])

    def test_rejects_bad_onehot(self):
        with pytest.raises(ValueError):
            TaskTargets(np.zeros((1, 2)), np.array([[1.0, 1, 0, 0, 0]]), np.zeros((1, 1)), np.zeros((1, 1, 2, 2)))

    def test_rejects_heatmap_out_of_range(self):
        with pytest.raises(ValueError):
            TaskTargets(np.zeros((1, 2)), np.eye(5)[[0]], np.zeros((1, 1)), np.full((1, 1, 2, 2), 1.5))


class TestMasking:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.model = build_model(TINY)
        self.x = normalize_images(rng.integers(0, 256, (2, 18, 32, 3), dtype=np.uint8), TINY)
        self.targets = TaskTargets.from_labels(
            [True, False], [False, True], [1, 4], [5, 150], rng.uniform(0, 0.1, (2, 1, 9, 16))
        )

    def test_total_is_unweighted_sum(self):
        parts = {k: Tensor(np.float64(v), dtype=np.float64) for k, v in
                 zip(("behaviour", "density", "count_reg", "count_heatmap"), (0.1, 0.2, 0.3, 0.4))}
        assert total_loss(parts, TaskMask()).item() == pytest.approx(1.0)

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError):
            total_loss({}, TaskMask(False, False, False, False))

    def test_only_heatmap(self):
        mask = TaskMask.only("count_heatmap")
        parts = task_losses(self.model.forward(self.x, "eval"), self.targets, mask)
        assert set(parts) == {"count_heatmap"}
        assert total_loss(parts, mask).item() == parts["count_heatmap"].item()

    def test_additivity_when_dropping_a_task(self):
        out = self.model.forward(self.x, "eval")
        full = task_losses(out, self.targets, TaskMask())
        total = total_loss(full, TaskMask()).item()
        for task in full:
            mask = TaskMask(**{t: t != task for t in full})
            reduced = total_loss(task_losses(out, self.targets, mask), mask)
            # bit-exact: the remaining terms, summed in the same order, and nothing else
            expected = np.float32(0)
            for t in mask.active:
                expected = np.float32(expected + full[t].data)
            assert reduced.item() == expected
            assert total - reduced.item() == pytest.approx(full[task].item(), abs=4 * np.finfo(np.float32).eps * total)

    def test_masked_head_gets_no_gradient(self):
        mask = TaskMask.only("density")
        total_loss(task_losses(self.model.forward(self.x, "train"), self.targets, mask), mask).backward()
        for name, t in self.model.params.items():
            if name.startswith(("head_behaviour", "head_count", "head_heatmap")):
                assert t.grad is None or not t.grad.any(), name
        assert self.model.params["head_density.weight"].grad.any()


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_nonnegative_and_batch_permutation_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        pb = rng.uniform(0, 1, (n, 2))
        tb = rng.integers(0, 2, (n, 2)).astype(float)
        logits = rng.standard_normal((n, 5))
        pd = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        td = np.eye(5)[rng.integers(0, 5, n)]
        pc, tc = rng.uniform(0, 300, (n, 1)), rng.uniform(0, 300, (n, 1))
        perm = rng.permutation(n)
        for loss, p, t in ((behaviour_loss, pb, tb), (density_loss, pd, td), (count_reg_loss, pc, tc)):
            a = loss(t64(p), t).item()
            assert a >= 0
            assert loss(t64(p[perm]), t[perm]).item() == pytest.approx(a, rel=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        z = Tensor(rng.standard_normal((3, 5)), dtype=np.float64, name="z")
        target = np.eye(5)[[0, 3, 1]]
        report = ag.finite_diff_check(lambda: density_loss(ag.softmax(z), target), [z], epsilon=1e-4)
        assert report.passed
