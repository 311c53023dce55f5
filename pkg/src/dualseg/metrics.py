"""Confusion-matrix accumulation and the benchmark metric conventions.

Overall accuracy covers every class including background; mean F1 and
mean IoU average the foreground classes only. A foreground class absent
from both prediction and ground truth is excluded from the mean instead
of being scored 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    oa: float
    mf1: float
    miou: float
    per_class_f1: dict[int, float]
    per_class_iou: dict[int, float]
    pixels: int
    foreground_ids: list[int]

    def as_dict(self) -> dict:
        return {
            "oa": self.oa,
            "mf1": self.mf1,
            "miou": self.miou,
            "per_class_f1": {str(k): v for k, v in self.per_class_f1.items()},
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "pixels": self.pixels,
            "foreground_ids": self.foreground_ids,
        }


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, foreground_ids: list[int] | None = None):
        self.num_classes = num_classes
        if foreground_ids is None:
            foreground_ids = list(range(num_classes - 1))  # last class is background
        self.foreground_ids = list(foreground_ids)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int | None = None) -> None:
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and ground truth sizes differ: {pred.shape} vs {gt.shape}")
        if ignore_index is not None:
            keep = gt != ignore_index
            pred, gt = pred[keep], gt[keep]
        if pred.size == 0:
            return
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            bad = (arr < 0) | (arr >= self.num_classes)
            if bad.any():
                i = int(np.argmax(bad))
                raise ValueError(f"{name} label {int(arr[i])} out of range at pixel {i}")
        flat = gt * self.num_classes + pred
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def overall_accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    def _tp_fp_fn(self, class_id: int) -> tuple[int, int, int]:
        tp = int(self.counts[class_id, class_id])
        fp = int(self.counts[:, class_id].sum()) - tp
        fn = int(self.counts[class_id, :].sum()) - tp
        return tp, fp, fn

    def class_f1(self, class_id: int) -> float | None:
        tp, fp, fn = self._tp_fp_fn(class_id)
        if tp + fp + fn == 0:
            return None  # absent class: no score
        return 2.0 * tp / (2.0 * tp + fp + fn)

    def class_iou(self, class_id: int) -> float | None:
        tp, fp, fn = self._tp_fp_fn(class_id)
        if tp + fp + fn == 0:
            return None
        return tp / (tp + fp + fn)

    def mean_f1(self) -> float:
        scores = [s for c in self.foreground_ids if (s := self.class_f1(c)) is not None]
        return float(np.mean(scores)) if scores else 0.0

    def mean_iou(self) -> float:
        scores = [s for c in self.foreground_ids if (s := self.class_iou(c)) is not None]
        return float(np.mean(scores)) if scores else 0.0

    def report(self) -> MetricsReport:
        per_f1 = {c: s for c in self.foreground_ids if (s := self.class_f1(c)) is not None}
        per_iou = {c: s for c in self.foreground_ids if (s := self.class_iou(c)) is not None}
        return MetricsReport(
            oa=self.overall_accuracy(),
            mf1=self.mean_f1(),
            miou=self.mean_iou(),
            per_class_f1=per_f1,
            per_class_iou=per_iou,
            pixels=self.total,
            foreground_ids=list(self.foreground_ids),
        )
