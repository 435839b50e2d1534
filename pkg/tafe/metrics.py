"""
Confusion-matrix segmentation metrics (per-class IoU / Dice and their means).
"""
from typing import Iterable, List, Optional, Tuple

import numpy as np

from tafe.errors import DataError

ABSENT_CLASS_RULE = "classes with an empty union are excluded from the mean"

PerClass = List[Optional[float]]


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, classes: int, counts: Optional[np.ndarray] = None):
        if classes < 1:
            raise DataError(f"confusion matrix needs >= 1 class, got {classes}")
        self.classes = classes
        if counts is None:
            counts = np.zeros((classes, classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (classes, classes) or (counts < 0).any():
            raise DataError(f"counts must be a nonnegative {classes}x{classes} grid")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """Counts after adding every pixel of (pred, gt); self is left unchanged."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        k = self.classes
        for name, ids in (("prediction", pred), ("ground truth", gt)):
            if ids.size and (ids.min() < 0 or ids.max() >= k or not np.array_equal(ids, np.round(ids))):
                raise DataError(f"{name} holds class ids outside [0, {k})")
        flat = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        added = np.bincount(flat, minlength=k * k).reshape(k, k)
        return ConfusionMatrix(k, self.counts + added)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise DataError(f"cannot merge {self.classes}-class and {other.classes}-class matrices")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    @staticmethod
    def reduce(matrices: Iterable["ConfusionMatrix"], classes: int) -> "ConfusionMatrix":
        out = ConfusionMatrix(classes)
        for cm in matrices:
            out = out.merge(cm)
        return out

    def _parts(self) -> Tuple[np.ndarray, np.ndarray]:
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        return tp, union

    def absent_classes(self) -> List[int]:
        _, union = self._parts()
        return [k for k in range(self.classes) if union[k] == 0]

    def _mean(self, values: PerClass, metric: str) -> float:
        present = [v for v in values if v is not None]
        if not present:
            raise DataError(f"{metric} undefined: every class is absent")
        return float(np.mean(present))

    def miou(self) -> Tuple[PerClass, float]:
        tp, union = self._parts()
        per_class = [None if union[k] == 0 else float(tp[k] / union[k]) for k in range(self.classes)]
        return per_class, self._mean(per_class, "mIoU")

    def mdice(self) -> Tuple[PerClass, float]:
        tp, union = self._parts()
        size = union + tp
        per_class = [None if size[k] == 0 else float(2.0 * tp[k] / size[k]) for k in range(self.classes)]
        return per_class, self._mean(per_class, "mDice")

    def to_dict(self):
        return {"classes": self.classes, "counts": self.counts.tolist()}


def confusion(pred: np.ndarray, gt: np.ndarray, classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(classes).accumulate(pred, gt)
