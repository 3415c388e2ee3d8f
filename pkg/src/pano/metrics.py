"""Confusion matrix and IoU metrics for semantic segmentation."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError
from .tensor import IGNORE_INDEX


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignore_count = 0

    @property
    def scored(self) -> int:
        return int(self.counts.sum()) + self.ignore_count

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).astype(np.int64)
        gt = np.asarray(gt).astype(np.int64)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and label {gt.shape} shapes differ")
        k = self.num_classes
        keep = gt != self.ignore_index
        g, p = gt[keep], pred[keep]
        if np.any((g < 0) | (g >= k)) or np.any((p < 0) | (p >= k)):
            raise DataError(f"label ids outside 0..{k - 1} (ignore={self.ignore_index})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        self.ignore_count += int((~keep).sum())
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge matrices with different class counts")
        self.counts += other.counts
        self.ignore_count += other.ignore_count
        return self

    def pixel_accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    defined = ~np.isnan(iou)
    mean = float(iou[defined].mean()) if defined.any() else 0.0
    return iou, mean


def format_table(cm: ConfusionMatrix, names=None) -> str:
    iou, mean = miou(cm)
    names = names or [f"class{k}" for k in range(cm.num_classes)]
    lines = [f"{'class':<12}{'IoU':>8}"]
    for name, v in zip(names, iou):
        lines.append(f"{name:<12}{'n/a' if np.isnan(v) else f'{100 * v:.2f}':>8}")
    lines.append(f"{'mIoU':<12}{100 * mean:>8.2f}")
    return "\n".join(lines)
