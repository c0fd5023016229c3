"""Segmentation metrics: confusion-based semantic scores and per-object part IoU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    macc: float
    oa: float
    ins_miou: float | None = None
    cat_miou: float | None = None

    def line(self) -> str:
        return f"oa={self.oa:.6f} macc={self.macc:.6f} miou={self.miou:.6f}"


def confusion_matrix(pred, label, class_count: int) -> np.ndarray:
    """Counts with rows indexed by ground truth and columns by prediction."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    label = np.asarray(label, dtype=np.int64).ravel()
    if pred.shape != label.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {label.shape}")
    for name, v in (("prediction", pred), ("label", label)):
        if v.size and (v.min() < 0 or v.max() >= class_count):
            raise ValueError(f"{name} outside [0, {class_count})")
    return np.bincount(label * class_count + pred, minlength=class_count ** 2).reshape(class_count, class_count)


def compute_metrics(confusion) -> MetricReport:
    """IoU, mean IoU, mean class accuracy and overall accuracy.

    Classes that never occur in the ground truth are left out of the
    ``miou`` and ``macc`` means; their per-class IoU is reported as NaN when
    they are also never predicted, and 0 otherwise.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError(f"confusion must be a nonempty square matrix, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion entries must be nonnegative")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    truth = cm.sum(axis=1)
    union = truth + cm.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = tp / truth
    present = truth > 0
    return MetricReport(confusion=cm.astype(np.int64), per_class_iou=iou, miou=float(iou[present].mean()),
                        macc=float(recall[present].mean()), oa=float(tp.sum() / total))


def object_miou(pred, label, parts) -> float:
    """Mean IoU over one object's part set; parts absent from both sides score 1."""
    pred, label = np.asarray(pred), np.asarray(label)
    scores = []
    for p in parts:
        inter = np.sum((pred == p) & (label == p))
        union = np.sum((pred == p) | (label == p))
        scores.append(1.0 if union == 0 else inter / union)
    return float(np.mean(scores))


def instance_miou(objects, category_parts: dict) -> tuple[float, float]:
    """``(ins_miou, cat_miou)`` over ``(pred, label, category)`` triples.

    ``category_parts`` maps each category to the part labels it owns.
    """
    per_cat: dict = {}
    scores = []
    for pred, label, cat in objects:
        if cat not in category_parts:
            raise ValueError(f"unknown category {cat!r}")
        s = object_miou(pred, label, category_parts[cat])
        scores.append(s)
        per_cat.setdefault(cat, []).append(s)
    if not scores:
        raise ValueError("no objects")
    return float(np.mean(scores)), float(np.mean([np.mean(v) for v in per_cat.values()]))
