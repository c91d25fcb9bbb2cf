"""Confusion matrices and mean IoU over semantic classes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classes import CLASS_NAMES, NUM_CLASSES, SEMANTIC_CLASSES
from .occ_head import OccupancyGrid


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes=NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(pred_labels, gt: OccupancyGrid, use_mask=True, into: ConfusionMatrix = None) -> ConfusionMatrix:
    """Add one frame to a confusion matrix (a fresh one unless ``into`` is given)."""
    pred = np.asarray(pred_labels)
    if pred.shape != gt.labels.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.labels.shape} differ")
    cm = into if into is not None else ConfusionMatrix.empty()
    k = cm.num_classes
    bad = np.argwhere((pred < 0) | (pred >= k))
    if len(bad):
        raise ValueError(f"predicted labels outside [0, {k - 1}] at indices {bad[:10].tolist()}")
    g, p = gt.labels, pred.astype(np.int64)
    if use_mask:
        g, p = g[gt.camera_mask], p[gt.camera_mask]
    counts = np.bincount(g.ravel() * k + p.ravel(), minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for classes with no TP, FP or FN."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    return np.divide(tp, denom, out=np.full(len(tp), np.nan), where=denom > 0)


def miou(per_class, classes=SEMANTIC_CLASSES) -> float:
    """Mean of the present (non-NaN) values among ``classes``; NaN if none."""
    vals = np.asarray(per_class, dtype=np.float64)
    if classes is not None:
        vals = vals[list(classes)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def iou_report(cm: ConfusionMatrix, classes=SEMANTIC_CLASSES) -> dict:
    """JSON-ready table keyed by class name; absent classes map to None."""
    ious = iou_per_class(cm)
    per = {CLASS_NAMES[c]: (None if np.isnan(ious[c]) else float(ious[c])) for c in classes}
    m = miou(ious, classes)
    return {"per_class_iou": per, "miou": None if np.isnan(m) else m}
