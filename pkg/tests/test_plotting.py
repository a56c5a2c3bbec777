import numpy as np
import pytest
from PIL import Image

from resnetcrowd.plotting import heatmap_to_image, plot_banded_mae, plot_loss_curves, plot_roc_curves, save_heatmap_png
from resnetcrowd.training import TrainHistory


def png_size(path):
    with Image.open(path) as im:
        return im.format, im.size


class TestHeatmapImage:
    def test_grayscale_scaled_by_max(self):
        img = heatmap_to_image(np.array([[0.0, 0.1], [0.2, 0.4]]))
        assert img.dtype == np.uint8 and img.shape == (2, 2)
        assert img.max() == 255 and img[0, 0] == 0
        assert img[0, 1] == pytest.approx(64, abs=1)

    def test_all_zero_map(self):
        assert not heatmap_to_image(np.zeros((3, 4))).any()

    def test_colormap_gives_rgb(self):
        img = heatmap_to_image(np.random.default_rng(0).random((9, 16)), "jet")
        assert img.shape == (9, 16, 3)

    def test_png_file(self, tmp_path):
        path = save_heatmap_png(np.eye(5), tmp_path / "h.png")
        assert png_size(path) == ("PNG", (5, 5))


class TestFigures:
    def test_loss_curves(self, tmp_path):
        hist = TrainHistory([
            {"epoch": e, "losses": {"behaviour": 1 / e, "density": 2 / e}, "total": 3 / e} for e in range(1, 6)
        ])
        path = plot_loss_curves({"fold 0": hist}, tmp_path / "loss.png")
        assert png_size(path)[0] == "PNG"

    def test_roc_and_bands(self, tmp_path):
        curve = (np.array([0, 0.5, 1.0]), np.array([0, 1.0, 1.0]), 0.75)
        assert png_size(plot_roc_curves({"a": curve}, tmp_path / "roc.png"))[0] == "PNG"
        rows = [{"run": "x", "low": 1.0, "mid": None, "high": 3.0}]
        assert png_size(plot_banded_mae(rows, ["low", "mid", "high"], tmp_path / "b.png"))[0] == "PNG"

    def test_deterministic_bytes(self, tmp_path):
        curve = (np.array([0, 1.0]), np.array([0, 1.0]), 0.5)
        a = plot_roc_curves({"a": curve}, tmp_path / "a.png").read_bytes()
        b = plot_roc_curves({"a": curve}, tmp_path / "b.png").read_bytes()
        assert a == b
