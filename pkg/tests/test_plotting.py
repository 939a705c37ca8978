import numpy as np
from PIL import Image

from sseg.evaluation import EvalReport, accumulate_labels
from sseg.plotting import plot_comparison, plot_iou_bars, plot_loss_curve

NAMES = ["background", "A", "B"]


def _is_png(path):
    with Image.open(path) as im:
        return im.format == "PNG" and im.size[0] > 100


def test_loss_curve(tmp_path):
    records = [{"step": i, "total": 5.0 / (i + 1), "mask": 1.0, "contrastive": None} for i in range(20)]
    assert _is_png(plot_loss_curve(records, tmp_path / "sub" / "loss.png"))
    assert _is_png(plot_loss_curve([{"step": 0, "loss": 1.0}], tmp_path / "s.png", keys=("loss",)))


def test_iou_figures(tmp_path):
    a = accumulate_labels(EvalReport(NAMES), np.array([[1, 2], [2, 2]]), np.array([[1, 1], [2, 2]]))
    b = accumulate_labels(EvalReport(NAMES), np.array([[1, 1], [2, 2]]), np.array([[1, 1], [2, 2]]))
    assert _is_png(plot_iou_bars(a, tmp_path / "iou.png"))
    assert _is_png(plot_comparison(a, b, tmp_path / "cmp.png"))
