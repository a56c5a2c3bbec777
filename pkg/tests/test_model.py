import json
import math

import numpy as np
import pytest

from resnetcrowd import autograd as ag
from resnetcrowd.autograd import Tensor, no_grad
from resnetcrowd.model import (
    REPORTED_PARAMETER_COUNT,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ResnetCrowdConfig,
    build_model,
    load_checkpoint,
    normalize_images,
    parameter_count,
    save_checkpoint,
)
from resnetcrowd.model import backbone

from conftest import TINY


def layer_arithmetic(c=64, behaviours=2, levels=5):
    conv = lambda cin, cout, k: cin * cout * k * k
    bn = 2 * c
    backbone_total = conv(3, c, 7) + bn + 2 * (2 * conv(c, c, 3) + 2 * bn)
    heads = (c + 1) + (c + 1) + (c * behaviours + behaviours) + (c * levels + levels)
    return backbone_total, heads


def images(n, config, seed=0):
    rng = np.random.default_rng(seed)
    return normalize_images(rng.integers(0, 256, (n, config.input_height, config.input_width, 3), dtype=np.uint8), config)


class TestArchitecture:
    def test_parameter_count_matches_layer_arithmetic(self):
        model = build_model()
        backbone_total, heads = layer_arithmetic()
        assert backbone_total == 157_504
        assert heads == 585
        assert parameter_count(model) == backbone_total + heads == 158_089
        assert REPORTED_PARAMETER_COUNT - parameter_count(model) == 22_845

    def test_parameter_count_matches_checkpoint_manifest_walk(self, tmp_path):
        model = build_model(TINY)
        save_checkpoint(model, tmp_path / "ckpt")
        body = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        trainable = set(body["meta"]["parameters"])
        walked = sum(math.prod(t["shape"]) for t in body["tensors"] if t["name"] in trainable)
        assert walked == parameter_count(model)

    def test_five_backbone_convolutions(self):
        model = build_model(TINY)
        convs = [n for n, t in model.params.items() if n.endswith(".weight") and t.ndim == 4 and not n.startswith("head")]
        assert convs == ["conv1.weight", "block1.conv1.weight", "block1.conv2.weight", "block2.conv1.weight", "block2.conv2.weight"]

    def test_full_resolution_output_shapes(self):
        model = build_model()
        with no_grad():
            out = model.forward(images(1, model.config), "eval")
        assert out.heatmap.shape == (1, 1, 90, 160)
        assert out.count_reg.shape == (1, 1)
        assert out.behaviour.shape == (1, 2)
        assert out.density.shape == (1, 5)
        assert out.features.shape == (1, 64)

    def test_wrong_resolution_rejected(self):
        model = build_model(TINY)
        with pytest.raises(ValueError, match="shape"):
            model.forward(Tensor(np.zeros((1, 3, 20, 32))))

    def test_odd_resolution_rejected(self):
        with pytest.raises(ValueError):
            ResnetCrowdConfig(input_width=33, input_height=18)


class TestInitialisation:
    def test_same_seed_same_parameters(self):
        a, b = build_model(TINY), build_model(TINY)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_xavier_bound_on_behaviour_head(self):
        w = build_model(TINY).params["head_behaviour.weight"].data
        assert np.abs(w).max() <= math.sqrt(6 / 66)

    def test_backbone_scale(self):
        w = build_model().params["block1.conv1.weight"].data
        assert w.std() == pytest.approx(math.sqrt(2 / (64 * 9)), rel=0.05)

    def test_biases_zero_and_bn_identity(self):
        model = build_model(TINY)
        for name, t in model.params.items():
            if name.endswith((".bias", ".beta")):
                assert not t.data.any()
            if name.endswith(".gamma"):
                np.testing.assert_array_equal(t.data, 1.0)


class TestForward:
    def test_output_ranges(self):
        model = build_model(TINY)
        out = model.forward(images(3, TINY), "train")
        assert np.all(out.count_reg.data >= 0)
        assert np.all((out.behaviour.data >= 0) & (out.behaviour.data <= 1))
        assert np.all((out.heatmap.data >= 0) & (out.heatmap.data <= 1))
        np.testing.assert_allclose(out.density.data.sum(axis=1), 1.0, atol=1e-5)

    def test_zero_heads(self):
        model = build_model(TINY)
        for name, t in model.params.items():
            if name.startswith("head"):
                t.data[:] = 0
        with no_grad():
            out = model.forward(images(2, TINY), "eval")
        np.testing.assert_allclose(out.behaviour.data, 0.5)
        np.testing.assert_allclose(out.density.data, 0.2, rtol=1e-6)
        np.testing.assert_array_equal(out.count_reg.data, 0.0)

    def test_eval_is_repeatable_and_pure(self):
        model = build_model(TINY)
        x = images(2, TINY)
        buffers = {k: v.copy() for k, v in model.buffers().items()}
        with no_grad():
            first = model.forward(x, "eval")
            second = model.forward(x, "eval")
        np.testing.assert_array_equal(first.heatmap.data, second.heatmap.data)
        for k, v in model.buffers().items():
            np.testing.assert_array_equal(v, buffers[k])

    def test_train_mode_updates_running_stats(self):
        model = build_model(TINY)
        before = model.bn["bn1"].running_mean.copy()
        model.forward(images(2, TINY), "train")
        assert not np.array_equal(before, model.bn["bn1"].running_mean)

    def test_zeroed_residual_branches_leave_stem_output(self):
        model = build_model(TINY)
        for block in ("block1", "block2"):
            model.params[f"{block}.conv2.weight"].data[:] = 0
        x = images(2, TINY)
        with no_grad():
            maps = backbone(model, x, "eval")
            stem = ag.relu(ag.batch_norm(ag.conv2d(x, model.params["conv1.weight"], None, 2, 3), model.bn["bn1"], "eval"))
        np.testing.assert_array_equal(maps.data, stem.data)

    def test_residual_branch_matters(self):
        model = build_model(TINY)
        x = images(2, TINY)
        with no_grad():
            before = backbone(model, x, "eval").data.copy()
            model.params["block2.conv2.weight"].data[:] = 0
            after = backbone(model, x, "eval").data
        assert not np.allclose(before, after)

    def test_heatmap_counts_integrate(self):
        model = build_model(TINY)
        with no_grad():
            out = model.forward(images(2, TINY), "eval")
        np.testing.assert_allclose(out.heatmap_counts(), out.heatmap.data.sum(axis=(1, 2, 3)), rtol=1e-6)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = build_model(TINY)
        model.forward(images(2, TINY), "train")  # move running stats off their defaults
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == model.config
        x = images(2, TINY, seed=5)
        with no_grad():
            a = model.forward(x, "eval")
            b = loaded.forward(x, "eval")
        for field in ("heatmap", "count_reg", "behaviour", "density", "features"):
            np.testing.assert_array_equal(getattr(a, field).data, getattr(b, field).data)

    def test_fresh_checkpoints_are_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(build_model(TINY), tmp_path / name)
        for f in ("manifest.json", "weights.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_corrupt_manifest_byte(self, tmp_path):
        path = save_checkpoint(build_model(TINY), tmp_path / "ckpt")
        manifest = path / "manifest.json"
        original = manifest.read_bytes()
        rng = np.random.default_rng(0)
        for pos in rng.choice(len(original) - 1, size=40, replace=False):
            corrupted = bytearray(original)
            corrupted[pos] = ord("#")
            manifest.write_bytes(bytes(corrupted))
            with pytest.raises(CheckpointError):
                load_checkpoint(path)

    def test_edited_manifest_value_fails_checksum(self, tmp_path):
        path = save_checkpoint(build_model(TINY), tmp_path / "ckpt")
        manifest = path / "manifest.json"
        text = manifest.read_text()
        manifest.write_text(text.replace('"byte_length": 37632', '"byte_length": 37636', 1))
        assert manifest.read_text() != text
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_corrupt_weight_byte(self, tmp_path):
        path = save_checkpoint(build_model(TINY), tmp_path / "ckpt")
        blob = bytearray((path / "weights.bin").read_bytes())
        blob[100] ^= 0xFF
        (path / "weights.bin").write_bytes(bytes(blob))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        path = save_checkpoint(build_model(TINY), tmp_path / "ckpt")
        blob = (path / "weights.bin").read_bytes()
        (path / "weights.bin").write_bytes(blob[:-4])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = save_checkpoint(build_model(TINY), tmp_path / "ckpt")
        body = json.loads((path / "manifest.json").read_text())
        body["magic"] = "something-else"
        (path / "manifest.json").write_text(json.dumps(body))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path):
        model = build_model(TINY)
        model.params["head_density.weight"] = Tensor(np.zeros((64, 4)))
        path = save_checkpoint(model, tmp_path / "ckpt")
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_errors_share_a_base(self):
        for exc in (CheckpointChecksumError, CheckpointShapeError, CheckpointTruncatedError, CheckpointFormatError):
            assert issubclass(exc, CheckpointError)
