"""Binary confusion matrices and IoU / mIoU."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class EmptyUnionWarning(UserWarning):
    """A class is absent from both prediction and ground truth; its IoU is taken as 1."""


@dataclass
class Confusion:
    """2 x 2 pixel counts indexed (ground truth, prediction)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.counts + other.counts)

    def copy(self) -> "Confusion":
        return Confusion(self.counts.copy())


def accumulate(c: Confusion, pred, gt) -> Confusion:
    """Return ``c`` plus the per-pixel tallies of one prediction/annotation pair."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} labels must be 0 or 1")
    idx = gt.astype(np.int64).ravel() * 2 + pred.astype(np.int64).ravel()
    return Confusion(c.counts + np.bincount(idx, minlength=4).reshape(2, 2))


def iou_with_flag(c: Confusion, cls: int) -> tuple[float, bool]:
    """(IoU, degenerate) where degenerate marks an empty union scored as 1.0."""
    if cls not in (0, 1):
        raise ValueError(f"class must be 0 or 1, got {cls}")
    m = c.counts
    tp = m[cls, cls]
    fp = m[1 - cls, cls]
    fn = m[cls, 1 - cls]
    union = tp + fp + fn
    if union == 0:
        return 1.0, True
    return float(tp / union), False


def iou(c: Confusion, cls: int) -> float:
    value, degenerate = iou_with_flag(c, cls)
    if degenerate:
        warnings.warn(f"class {cls} absent from prediction and ground truth", EmptyUnionWarning, stacklevel=2)
    return value


def miou(c: Confusion) -> float:
    return 0.5 * (iou(c, 0) + iou(c, 1))


@dataclass
class MetricsRow:
    run_id: str
    config_hash: str
    iteration: int
    split: str
    iou_lesion: float
    iou_background: float
    miou: float
    degenerate: bool = False

    HEADER = ("run_id", "config_hash", "iteration", "split", "IoU_lesion", "IoU_background", "mIoU")

    def csv_fields(self) -> list[str]:
        return [
            self.run_id,
            self.config_hash,
            str(self.iteration),
            self.split,
            repr(self.iou_lesion),
            repr(self.iou_background),
            repr(self.miou),
        ]


def metrics_row(c: Confusion, run_id: str, config_hash: str, iteration: int, split: str) -> MetricsRow:
    les, d1 = iou_with_flag(c, 1)
    bg, d0 = iou_with_flag(c, 0)
    return MetricsRow(run_id, config_hash, iteration, split, les, bg, 0.5 * (les + bg), d0 or d1)
