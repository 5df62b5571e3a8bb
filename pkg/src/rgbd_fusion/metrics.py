"""Segmentation metrics and error maps.

IoU follows the usual TP / (TP + FP + FN) per class. The mean IoU averages
over classes that occur in the ground truth or in the prediction; a class
absent from both has no defined IoU and is left out of the mean.
"""

from __future__ import annotations

import numpy as np

from .ops import IGNORE_INDEX

NEUTRAL = (0, 0, 0)
RED = (255, 0, 0)
GREEN = (0, 255, 0)


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise MetricError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
        keep = gt != ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
            raise MetricError(f"class ids must lie in [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both ground truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        out = np.full(self.num_classes, np.nan)
        np.divide(tp, union, out=out, where=union > 0)
        return out

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise MetricError("no labelled pixels counted")
        return float(iou[present].mean())

    def pixel_accuracy(self) -> float:
        if self.total == 0:
            raise MetricError("no labelled pixels counted")
        return float(np.trace(self.counts) / self.total)

    def summary(self) -> dict:
        return {"miou": self.miou(), "pixel_accuracy": self.pixel_accuracy(),
                "iou": [None if np.isnan(v) else float(v) for v in self.iou()],
                "confusion": self.counts.tolist(), "total": self.total}


def error_map(pred_a: np.ndarray, pred_b: np.ndarray, gt: np.ndarray,
              ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """H x W x 3 uint8 comparison of two predictions.

    Red marks pixels ``pred_b`` gets wrong; green marks pixels ``pred_a``
    gets wrong but ``pred_b`` gets right; everything else, including
    ignored pixels, is neutral.
    """
    pred_a, pred_b, gt = map(np.asarray, (pred_a, pred_b, gt))
    if not (pred_a.shape == pred_b.shape == gt.shape) or gt.ndim != 2:
        raise MetricError(f"extent mismatch: {pred_a.shape}, {pred_b.shape}, {gt.shape}")
    labelled = gt != ignore_index
    b_wrong = labelled & (pred_b != gt)
    a_only_wrong = labelled & (pred_a != gt) & ~b_wrong
    out = np.empty(gt.shape + (3,), dtype=np.uint8)
    out[:] = NEUTRAL
    out[b_wrong] = RED
    out[a_only_wrong] = GREEN
    return out
