"""Report figures written to files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(records, path, keys=("total", "mask", "contrastive")):
    """Line plot of the logged loss components against the step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in records]
    for key in keys:
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax.plot(steps, [np.nan if v is None else v for v in vals], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_iou_bars(report, path, title=None):
    """Per-class IoU bars; classes with no pixels are drawn as empty slots."""
    names = list(report.class_names)
    ious = [np.nan if v is None else v for v in report.iou_per_class]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 1), 3.5))
    ax.bar(range(len(names)), ious, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.axhline(report.miou, color="tab:red", linestyle="--", label=f"mIoU {report.miou:.3f}")
    ax.legend()
    ax.set_title(title or f"{report.protocol}")
    return _save(fig, path)


def plot_comparison(teacher, student, path):
    """Grouped per-class IoU bars for two reports over the same classes."""
    names = list(teacher.class_names)
    x = np.arange(len(names))
    t = [np.nan if v is None else v for v in teacher.iou_per_class]
    s = [np.nan if v is None else v for v in student.iou_per_class]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 1), 3.5))
    ax.bar(x - 0.2, t, 0.4, label=f"teacher {teacher.miou:.3f}")
    ax.bar(x + 0.2, s, 0.4, label=f"student {student.miou:.3f}")
    ax.set_xticks(x, names, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend()
    return _save(fig, path)
