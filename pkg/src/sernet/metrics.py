"""Confusion-matrix accumulation and IoU / mean-IoU evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    num_classes: int
    ignore_index: int | None = IGNORE_INDEX
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        p = pred.reshape(-1).astype(np.int64)
        t = truth.reshape(-1).astype(np.int64)
        if self.ignore_index is not None:
            keep = t != self.ignore_index
            p, t = p[keep], t[keep]
        c = self.num_classes
        for name, arr in (("truth", t), ("prediction", p)):
            bad = (arr < 0) | (arr >= c)
            if bad.any():
                raise DataError(f"{name} label {arr[bad][0]} outside [0, {c})")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    return cm.accumulate(pred, truth)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both prediction and truth."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    iou = np.full(cm.num_classes, np.nan)
    defined = union > 0
    iou[defined] = tp[defined] / union[defined]
    return iou


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean over classes with a defined IoU.

    The sum is correctly rounded (``math.fsum``) so the value does not depend
    on summation order or on how many classes are undefined.
    """
    iou = per_class_iou(cm)
    defined = iou[~np.isnan(iou)]
    if defined.size == 0:
        raise DataError("mean IoU is undefined: no class appears in prediction or truth")
    return math.fsum(defined) / defined.size


def report_csv(cm: ConfusionMatrix, class_names: Sequence[str] | None = None) -> str:
    """``class_id,name,iou`` rows then ``mIoU,<value>``; undefined IoUs are written as ``nan``."""
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(cm.num_classes)]
    iou = per_class_iou(cm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "name", "iou"])
    for i, v in enumerate(iou):
        w.writerow([i, names[i], "nan" if np.isnan(v) else f"{v:.6f}"])
    w.writerow(["mIoU", f"{mean_iou(cm):.6f}"])
    return buf.getvalue()
