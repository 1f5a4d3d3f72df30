"""Confusion-matrix metrics for multi-class segmentation.

All scores come from one pooled K x K matrix (rows = truth, columns =
prediction). Per-class ratios whose denominator is zero resolve to 1.0 when
the class is absent from both masks and 0.0 otherwise. Macro values average
over the classes present in the ground truth.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .errors import DataError, DimensionError


class Score(NamedTuple):
    per_class: np.ndarray
    macro: float


class ConfusionMatrix:
    """Running pixel counts; ``counts[t, p]`` pixels of class t predicted as p."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise DimensionError(f"counts must be {num_classes}x{num_classes}, got {counts.shape}")
        if (counts < 0).any():
            raise DataError("confusion counts must be nonnegative")
        self.counts = counts

    def accumulate(self, pred_mask, true_mask) -> "ConfusionMatrix":
        """Add one (prediction, truth) pair in place and return self."""
        pred = np.asarray(pred_mask)
        true = np.asarray(true_mask)
        if pred.shape != true.shape:
            raise DimensionError(f"prediction {pred.shape} and truth {true.shape} differ in shape")
        k = self.num_classes
        for name, m in (("prediction", pred), ("truth", true)):
            if m.size and (m.min() < 0 or m.max() >= k):
                raise DataError(f"{name} mask has labels outside [0, {k})")
        idx = true.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.num_classes}, total={self.total})"


def _ratio(cm: ConfusionMatrix, num, den, exclude_background: bool) -> Score:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    in_truth = cm.counts.sum(axis=1) > 0
    in_pred = cm.counts.sum(axis=0) > 0
    absent = ~in_truth & ~in_pred
    with np.errstate(divide="ignore", invalid="ignore"):
        per = np.where(den > 0, num / np.where(den > 0, den, 1), np.where(absent, 1.0, 0.0))
    return Score(per, _macro(per, in_truth, exclude_background))


def _macro(per: np.ndarray, in_truth: np.ndarray, exclude_background: bool) -> float:
    keep = in_truth.copy()
    if exclude_background:
        keep[0] = False
    if not keep.any():
        return 1.0
    return float(per[keep].mean())


def dice(cm: ConfusionMatrix, exclude_background: bool = False) -> Score:
    return _ratio(cm, 2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, exclude_background)


def miou(cm: ConfusionMatrix, exclude_background: bool = False) -> Score:
    return _ratio(cm, cm.tp, cm.tp + cm.fp + cm.fn, exclude_background)


def precision(cm: ConfusionMatrix, exclude_background: bool = False) -> Score:
    return _ratio(cm, cm.tp, cm.tp + cm.fp, exclude_background)


def sensitivity(cm: ConfusionMatrix, exclude_background: bool = False) -> Score:
    return _ratio(cm, cm.tp, cm.tp + cm.fn, exclude_background)


def specificity(cm: ConfusionMatrix, exclude_background: bool = False) -> Score:
    return _ratio(cm, cm.tn, cm.tn + cm.fp, exclude_background)


def accuracy(cm: ConfusionMatrix, exclude_background: bool = False) -> Score:
    """Pixel accuracy.

    ``per_class`` holds the one-vs-rest accuracy ``(TP + TN) / total`` of each
    class; ``macro`` is the overall ``trace / total``, the single number a
    results table reports. ``exclude_background`` drops class-0 pixels from
    the overall figure.
    """
    total = cm.total
    if total == 0:
        return Score(np.ones(cm.num_classes), 1.0)
    per = (cm.tp + cm.tn) / total
    if exclude_background:
        fg = cm.counts[1:, :].sum()
        overall = float(cm.tp[1:].sum() / fg) if fg else 1.0
    else:
        overall = float(np.trace(cm.counts) / total)
    return Score(per, overall)


TABLE_COLUMNS = ("miou", "acc", "pre", "sen", "spe", "dice")


def summary(cm: ConfusionMatrix, exclude_background: bool = False) -> dict:
    """Macro scores keyed in results-table column order."""
    return {
        "miou": miou(cm, exclude_background).macro,
        "acc": accuracy(cm, exclude_background).macro,
        "pre": precision(cm, exclude_background).macro,
        "sen": sensitivity(cm, exclude_background).macro,
        "spe": specificity(cm, exclude_background).macro,
        "dice": dice(cm, exclude_background).macro,
    }
