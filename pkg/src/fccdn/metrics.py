"""Confusion accumulation and precision / recall / IoU / F1 / mIoU."""
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np


def _as_binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} must be a binary map")
        a = a.astype(bool)
    return a


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(pred, target) -> ConfusionCounts:
    p = _as_binary(pred, "prediction")
    t = _as_binary(target, "target")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def accumulate(pred, target, counts: Optional[ConfusionCounts] = None) -> ConfusionCounts:
    return (counts or ConfusionCounts()) + confusion(pred, target)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    iou: float
    f1: float
    empty: bool = False
    per_class_iou: Optional[List[float]] = None
    miou: Optional[float] = None

    def as_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    """Metrics from counts; any ratio with a zero denominator is reported as 0."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(precision, recall, iou, f1, empty=counts.total == 0)


def f1_from_pr(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    """K x K matrix, rows = target class, columns = predicted class."""
    p = np.asarray(pred).astype(np.int64).ravel()
    t = np.asarray(target).astype(np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError("shape mismatch")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= num_classes):
        raise ValueError("class index out of range")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def per_class_iou(matrix: np.ndarray) -> List[Optional[float]]:
    """IoU per class; ``None`` for classes absent from both target and prediction."""
    m = np.asarray(matrix)
    out = []
    for k in range(m.shape[0]):
        inter = int(m[k, k])
        union = int(m[k, :].sum() + m[:, k].sum() - inter)
        out.append(inter / union if union else None)
    return out


def compute_miou(matrix: np.ndarray) -> float:
    if np.asarray(matrix).shape[0] < 2:
        raise ValueError("mIoU needs at least two classes")
    ious = [v for v in per_class_iou(matrix) if v is not None]
    return float(np.mean(ious)) if ious else 0.0


def best_flip_f1(pred, target) -> MetricsReport:
    """Report for ``pred`` or ``1 - pred``, whichever has the higher F1.

    Segmentations learned only from change labels are defined up to a global
    swap of foreground and background.
    """
    p = _as_binary(pred, "prediction")
    a = compute_metrics(confusion(p, target))
    b = compute_metrics(confusion(~p, target))
    return a if a.f1 >= b.f1 else b
