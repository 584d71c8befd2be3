"""Confusion matrices and intersection-over-union."""
from __future__ import annotations

import numpy as np

from .tensor import IGNORE_LABEL


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise MetricError(f"counts must be {num_classes}x{num_classes}")

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
        C = self.num_classes
        keep = gt != IGNORE_LABEL
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if np.any(g >= C) or np.any(g < 0):
            raise MetricError(f"ground-truth label out of range for {C} classes")
        if np.any(pred >= C) or np.any(pred < 0):
            raise MetricError(f"predicted label out of range for {C} classes")
        self.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def pixels_scored(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> list[float | None]:
    """tp / (tp + fp + fn) per class; None where the denominator is zero."""
    counts = cm.counts
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    return [int(t) / int(u) if u else None for t, u in zip(tp, union)]


def miou(cm: ConfusionMatrix) -> float:
    defined = [v for v in iou_per_class(cm) if v is not None]
    if not defined:
        raise MetricError("mIoU undefined: no class was present or predicted")
    return sum(defined) / len(defined)


def evaluate(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    cm = ConfusionMatrix(num_classes).update(pred, gt)
    return {
        "per_class_iou": iou_per_class(cm),
        "miou": miou(cm),
        "pixels_scored": cm.pixels_scored,
    }
