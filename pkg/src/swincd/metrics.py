"""Pixel confusion counting and the five evaluation metrics."""

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
import torch

from .errors import DimensionError, InputValidationError

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class ConfusionCounts:
    """TP/TN/FP/FN pixel tallies; change is the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def _as_binary_array(x: ArrayLike, name: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise InputValidationError(f"{name} mask must be binary (0/1)")
    return x.astype(np.int64)


def confusion(pred_mask: ArrayLike, target: ArrayLike) -> ConfusionCounts:
    """Exact pixel tallies of a binary prediction against a binary label."""
    p = _as_binary_array(pred_mask, "prediction")
    t = _as_binary_array(target, "target")
    if p.shape != t.shape:
        raise DimensionError(
            f"prediction {p.shape} and target {t.shape} are not aligned"
        )
    tp = int(((p == 1) & (t == 1)).sum())
    tn = int(((p == 0) & (t == 0)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


@dataclass(frozen=True)
class MetricReport:
    """Precision, recall, change-class F1, IoU and overall accuracy.

    Metrics whose denominator was zero report 0 and appear in
    ``degenerate``.
    """

    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    degenerate: Tuple[str, ...] = ()

    def to_text(self) -> str:
        lines = [
            f"precision {self.precision:.6f}",
            f"recall {self.recall:.6f}",
            f"f1 {self.f1:.6f}",
            f"iou {self.iou:.6f}",
            f"oa {self.oa:.6f}",
        ]
        if self.degenerate:
            lines.append("degenerate " + ",".join(self.degenerate))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values, degenerate = {}, ()
        for line in text.strip().splitlines():
            key, _, raw = line.partition(" ")
            if key == "degenerate":
                degenerate = tuple(raw.split(","))
            else:
                values[key] = float(raw)
        return cls(degenerate=degenerate, **values)


def metrics(c: ConfusionCounts) -> MetricReport:
    """The five evaluation metrics from one set of confusion counts."""
    degenerate = []

    def ratio(name: str, num: int, den: int) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio("precision", c.tp, c.tp + c.fp)
    recall = ratio("recall", c.tp, c.tp + c.fn)
    f1 = ratio("f1", 2 * c.tp, 2 * c.tp + c.fp + c.fn)
    iou = ratio("iou", c.tp, c.tp + c.fp + c.fn)
    oa = ratio("oa", c.tp + c.tn, c.total)
    return MetricReport(precision=precision, recall=recall, f1=f1, iou=iou,
                        oa=oa, degenerate=tuple(degenerate))
