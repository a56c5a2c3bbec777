import csv
import json

import numpy as np
import pytest

from resnetcrowd.cli import build_parser, main
from resnetcrowd.config import KEYS
from resnetcrowd.data import save_image
from resnetcrowd.model import REPORTED_PARAMETER_COUNT

from conftest import TINY_FLAGS, run_cli


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    codes = [
        run_cli("gen-synth", "--out", root / "data", *TINY_FLAGS),
        run_cli("train", "--out", root / "train", "--manifest", root / "data" / "manifest.json", *TINY_FLAGS),
        run_cli("eval", "--out", root / "eval", "--run-dir", root / "train", *TINY_FLAGS),
    ]
    return root, codes


class TestHelp:
    def test_lists_every_key_and_default(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for key in KEYS:
            assert f"  {key} = " in text, key
            assert "--" + key.replace("_", "-") in text

    def test_subcommands(self):
        sub = next(a for a in build_parser()._actions if a.dest == "command")
        assert set(sub.choices) == {"gen-synth", "train", "eval", "infer", "anomaly", "check-grads"}


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train", "--out", str(tmp_path)])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            main(["explode"])
        assert info.value.code == 1

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text('{"epoch": 3}')
        assert run_cli("gen-synth", "--out", tmp_path, "--config", tmp_path / "c.json") == 1
        assert run_cli("gen-synth", "--out", tmp_path, "--folds", "1") == 1

    def test_missing_manifest_is_data_error(self, tmp_path):
        assert run_cli("train", "--out", tmp_path / "o", "--manifest", tmp_path / "none.json", *TINY_FLAGS) == 2

    def test_eval_of_non_run_directory(self, tmp_path):
        assert run_cli("eval", "--out", tmp_path / "o", "--run-dir", tmp_path) == 2

    def test_corrupt_checkpoint_is_data_error(self, pipeline, tmp_path):
        root, _ = pipeline
        import shutil
        ckpt = tmp_path / "ckpt"
        shutil.copytree(root / "train" / "resnetcrowd" / "fold_0" / "model", ckpt)
        (ckpt / "weights.bin").write_bytes(b"\0" * 16)
        image = root / "data" / "images" / "0000.png"
        assert run_cli("infer", "--out", tmp_path / "o", "--checkpoint", ckpt, "--image", image) == 2


class TestRoundTrip:
    def test_all_stages_succeed(self, pipeline):
        _, codes = pipeline
        assert codes == [0, 0, 0]

    def test_train_layout(self, pipeline):
        root, _ = pipeline
        train = root / "train"
        assert len(json.loads((train / "folds.json").read_text())["folds"]) == 2
        assert len(list(train.glob("*/fold_*/model/manifest.json"))) == 10
        assert len(list(train.glob("*/loss_curves.png"))) == 5

    def test_eval_outputs(self, pipeline, capsys):
        root, _ = pipeline
        out = root / "eval"
        for name in ("report.json", "report.txt", "predictions.csv", "banded_mae.png", "loss_curves.png",
                     "roc_fight.png", "roc_mob.png", "run_metadata.json"):
            assert (out / name).is_file(), name
        body = json.loads((out / "report.json").read_text())
        assert [r["run"] for r in body["task_table"]] == [
            "Single Task Behaviour", "Single Task Density Level Estimation", "Single Task Regression Counting",
            "Single Task Heatmap Counting", "ResnetCrowd"]

    def test_run_metadata(self, pipeline):
        root, _ = pipeline
        meta = json.loads((root / "train" / "run_metadata.json").read_text())
        assert meta["seed"] == 0
        assert len(meta["config_sha256"]) == 64
        assert {"numpy", "python", "resnetcrowd"} <= set(meta["versions"])
        assert meta["reported_parameter_count"] == REPORTED_PARAMETER_COUNT
        assert str(REPORTED_PARAMETER_COUNT - meta["parameter_count"]) in meta["parameter_count_note"]

    def test_infer_schema(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        ckpt = root / "train" / "resnetcrowd" / "fold_0" / "model"
        image = root / "data" / "images" / "0003.png"
        assert run_cli("infer", "--out", tmp_path, "--checkpoint", ckpt, "--image", image, "--colormap", "jet") == 0
        result = json.loads((tmp_path / "prediction.json").read_text())
        assert result["count_regression"] >= 0 and result["count_heatmap"] >= 0
        assert result["density_level"] in range(1, 6)
        assert sum(result["density_probabilities"]) == pytest.approx(1.0, abs=1e-5)
        # closed interval: 32-bit sigmoid rounds to exactly 1.0 for logits above about 17
        assert 0 <= result["fight_probability"] <= 1 and 0 <= result["mob_probability"] <= 1
        assert (tmp_path / result["heatmap_png"]).is_file()
        assert json.loads(capsys.readouterr().out.strip()) == result

    def test_anomaly_command(self, pipeline, tmp_path):
        root, _ = pipeline
        rng = np.random.default_rng(0)
        frames = tmp_path / "frames"
        frames.mkdir()
        rows = []
        for i in range(16):
            abnormal = i >= 12
            img = rng.integers(0, 60, (36, 64, 3), dtype=np.uint8)
            if abnormal:
                img[:, ::4] = 255
            save_image(img, frames / f"f{i:02d}.png")
            rows.append({"frame": f"f{i:02d}.png", "label": int(abnormal)})
        with (tmp_path / "labels.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, ["frame", "label"])
            writer.writeheader()
            writer.writerows(rows)
        ckpt = root / "train" / "resnetcrowd" / "fold_0" / "model"
        code = run_cli("anomaly", "--out", tmp_path / "o", "--checkpoint", ckpt, "--frames", frames,
                       "--labels", tmp_path / "labels.csv")
        assert code == 0
        summary = json.loads((tmp_path / "o" / "anomaly.json").read_text())
        assert summary["frames"] == 16 and summary["fit_frames"] == 12
        assert summary["auc"] is not None
        assert (tmp_path / "o" / "roc_anomaly.png").is_file()
        with (tmp_path / "o" / "scores.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 16

    def test_anomaly_without_frames(self, pipeline, tmp_path):
        root, _ = pipeline
        ckpt = root / "train" / "resnetcrowd" / "fold_0" / "model"
        (tmp_path / "empty").mkdir()
        assert run_cli("anomaly", "--out", tmp_path / "o", "--checkpoint", ckpt, "--frames", tmp_path / "empty") == 2


class TestCheckGrads:
    def test_layers_pass(self, tmp_path):
        assert run_cli("check-grads", "--out", tmp_path, "--layers-only") == 0
        body = json.loads((tmp_path / "grad_check.json").read_text())
        assert body["passed"] and len(body["cases"]) == 16

    def test_injected_fault_fails(self, tmp_path):
        assert run_cli("check-grads", "--out", tmp_path, "--layers-only", "--inject-fault", "conv2d") == 3
        lines = (tmp_path / "grad_check.txt").read_text().splitlines()
        assert any(line.startswith("FAIL conv2d") for line in lines)
        assert any(line.startswith("PASS relu") for line in lines)
