"""Confusion-matrix accumulation and mIoU under the two background protocols."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError
from .labels import BACKGROUND, SegmentationMap

WITH_BACKGROUND = "with_background"
WITHOUT_BACKGROUND = "without_background"
PROTOCOLS = (WITH_BACKGROUND, WITHOUT_BACKGROUND)


@dataclass
class EvalReport:
    """Running confusion matrix in ground-truth class space (rows = gt, cols = pred)."""

    class_names: list[str]
    protocol: str = WITH_BACKGROUND
    tau: Optional[float] = None
    background_class: Optional[int] = 0
    confusion: np.ndarray = field(default=None)
    n_images: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InputError(f"unknown protocol {self.protocol!r}")
        n = len(self.class_names)
        if self.confusion is None:
            self.confusion = np.zeros((n, n), dtype=np.int64)
        if self.background_class is not None and not 0 <= self.background_class < n:
            raise InputError("background_class outside the class list")

    @property
    def scored_classes(self) -> list[int]:
        skip = self.background_class if self.protocol == WITHOUT_BACKGROUND else None
        return [c for c in range(len(self.class_names)) if c != skip]

    @property
    def iou_per_class(self) -> list[Optional[float]]:
        cm = self.confusion
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        out: list[Optional[float]] = [None] * len(self.class_names)
        for c in self.scored_classes:
            denom = tp[c] + fp[c] + fn[c]
            if denom > 0:
                out[c] = float(tp[c] / denom)
        return out

    @property
    def miou(self) -> float:
        return miou(self)

    @property
    def pixel_accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.class_names != self.class_names or other.protocol != self.protocol:
            raise InputError("cannot merge reports with different classes or protocols")
        return EvalReport(self.class_names, self.protocol, self.tau, self.background_class,
                          self.confusion + other.confusion, self.n_images + other.n_images)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "tau": self.tau,
            "miou": self.miou if any(v is not None for v in self.iou_per_class) else None,
            "pixel_accuracy": self.pixel_accuracy,
            "n_images": self.n_images,
            "class_names": self.class_names,
            "iou_per_class": self.iou_per_class,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        bg = d["class_names"].index(BACKGROUND) if BACKGROUND in d["class_names"] else None
        return cls(list(d["class_names"]), d["protocol"], d.get("tau"), bg,
                   np.asarray(d["confusion"], dtype=np.int64), d.get("n_images", 0))

    def format_table(self) -> str:
        lines = [f"protocol: {self.protocol}",
                 f"tau: {'n/a' if self.tau is None else self.tau}",
                 f"images: {self.n_images}",
                 f"{'class':<20} {'IoU':>8}"]
        for name, iou in zip(self.class_names, self.iou_per_class):
            lines.append(f"{name:<20} {'-' if iou is None else f'{iou:8.4f}':>8}")
        lines.append(f"{'mIoU':<20} {self.miou:8.4f}")
        return "\n".join(lines)


def accumulate_labels(report: EvalReport, pred: np.ndarray, gt: np.ndarray, ignore_value=255):
    """Add one image whose predictions are already in ground-truth class space."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        pred = resize_nearest(pred, gt.shape)
    keep = gt != ignore_value
    if report.protocol == WITHOUT_BACKGROUND and report.background_class is not None:
        keep &= gt != report.background_class
    n = len(report.class_names)
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= n or g.min() < 0 or p.max() >= n or p.min() < 0):
        raise InputError("label outside the report's class list")
    report.confusion += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    report.n_images += 1
    return report


def accumulate(pred: SegmentationMap, gt, report: EvalReport) -> EvalReport:
    """Score a predicted map against a LabeledImage, translating the legend by class name."""
    if list(gt.class_names) != list(report.class_names):
        raise InputError("ground-truth classes differ from the report's classes")
    if report.protocol == WITH_BACKGROUND and pred.background_index is None:
        raise InputError("with_background protocol needs predictions carrying a background index")
    lookup = legend_to_gt(pred, report)
    mapped = lookup[pred.labels]
    return accumulate_labels(report, mapped, gt.labels, gt.ignore_value)


def legend_to_gt(pred: SegmentationMap, report: EvalReport) -> np.ndarray:
    names = report.class_names
    size = max(len(pred.legend), (pred.background_index or 0) + 1)
    lookup = np.zeros(size, dtype=np.int64)
    for i, name in enumerate(pred.legend.names):
        if name not in names:
            raise InputError(f"predicted class {name!r} is not a ground-truth class")
        lookup[i] = names.index(name)
    if pred.background_index is not None:
        if report.background_class is None:
            raise InputError("prediction has background but ground truth has no background class")
        lookup[pred.background_index] = report.background_class
    return lookup


def miou(report: EvalReport, class_presence_rule: str = "union_presence") -> float:
    if class_presence_rule != "union_presence":
        raise InputError(f"unknown class presence rule {class_presence_rule!r}")
    cm = report.confusion
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    # exact rational mean, rounded once
    defined = [Fraction(int(tp[c]), int(tp[c] + fp[c] + fn[c])) for c in report.scored_classes
               if tp[c] + fp[c] + fn[c] > 0]
    if not defined:
        raise InputError("no class has any scored pixel; mIoU undefined")
    return float(sum(defined) / len(defined))


def resize_nearest(labels: np.ndarray, shape) -> np.ndarray:
    h, w = labels.shape
    rows = (np.arange(shape[0]) * h // shape[0])
    cols = (np.arange(shape[1]) * w // shape[1])
    return labels[rows[:, None], cols[None, :]]


def save_report(report: EvalReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
