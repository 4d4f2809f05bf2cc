"""Confusion-matrix based segmentation metrics: IoU, mIoU, pixel accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

IGNORE_LABEL = 255

FLOODNET_CLASSES = (
    "building-flooded",
    "building-non-flooded",
    "road-flooded",
    "road-non-flooded",
    "water",
    "tree",
    "vehicle",
    "pool",
    "grass",
)


@dataclass(frozen=True)
class ClassSet:
    names: tuple[str, ...] = FLOODNET_CLASSES
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError(f"need at least 2 classes, got {len(names)}")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"class names must be unique; duplicated: {dupes}")
        if 0 <= self.ignore_label < len(names):
            raise ValueError(f"ignore_label {self.ignore_label} collides with a class id")

    @property
    def K(self) -> int:
        return len(self.names)

    @classmethod
    def generic(cls, k: int, ignore_label: int = IGNORE_LABEL) -> "ClassSet":
        return cls(tuple(f"class{i}" for i in range(k)), ignore_label)


@dataclass
class ConfusionMatrix:
    """counts[i, j] = pixels with ground truth i predicted as j."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError(f"cannot merge {self.K}-class and {other.K}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)

    def transpose(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts.T.copy())


def argmax_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels, (N, K, H, W) -> (N, H, W); ties go to the lowest id."""
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (N, K>=2, H, W), got {logits.shape}")
    return np.argmax(logits, axis=1).astype(np.int64)


def accumulate_confusion(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray, classes: ClassSet) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one batch of masks (``cm`` is not modified)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} differs from gt shape {gt.shape}")
    k = classes.K
    if cm.K != k:
        raise ValueError(f"confusion matrix is {cm.K}x{cm.K} but class set has {k} classes")
    bad_gt = ((gt < 0) | (gt >= k)) & (gt != classes.ignore_label)
    if bad_gt.any():
        pos = tuple(int(i) for i in np.argwhere(bad_gt)[0])
        raise ValueError(f"ground-truth label {int(gt[pos])} out of range [0, {k}) at pixel {pos}")
    keep = gt != classes.ignore_label
    bad_pred = ((pred < 0) | (pred >= k)) & keep
    if bad_pred.any():
        pos = tuple(int(i) for i in np.argwhere(bad_pred)[0])
        raise ValueError(f"predicted label {int(pred[pos])} out of range [0, {k}) at pixel {pos}")
    flat = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
    counts = np.bincount(flat, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN marks classes absent from both masks."""
    tp = cm.tp.astype(np.float64)
    denom = tp + cm.fp + cm.fn
    out = np.full(cm.K, np.nan)
    np.divide(tp, denom, out=out, where=denom > 0)
    return out


def mean_iou(cm_or_ious: Union[ConfusionMatrix, Sequence[float], np.ndarray], include_undefined_as_zero: bool = False) -> float:
    """Mean IoU over defined classes.

    Accepts a confusion matrix or a vector of per-class IoUs (NaN = undefined).
    With ``include_undefined_as_zero`` undefined classes count as 0 instead of
    being dropped.
    """
    if isinstance(cm_or_ious, ConfusionMatrix):
        ious = iou_per_class(cm_or_ious)
    else:
        ious = np.asarray(cm_or_ious, dtype=np.float64)
    defined = ~np.isnan(ious)
    if include_undefined_as_zero:
        if ious.size == 0:
            raise ValueError("mean IoU of zero classes is undefined")
        return float(np.where(defined, ious, 0.0).mean())
    if not defined.any():
        raise ValueError("mean IoU is undefined: no class appears in ground truth or prediction")
    return float(ious[defined].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Global accuracy (trace / total) and per-class recall (NaN for empty rows)."""
    total = cm.total
    if total == 0:
        raise ValueError("pixel accuracy is undefined: no pixels were counted")
    rows = cm.counts.sum(axis=1).astype(np.float64)
    per_class = np.full(cm.K, np.nan)
    np.divide(cm.tp.astype(np.float64), rows, out=per_class, where=rows > 0)
    return float(np.trace(cm.counts) / total), per_class


@dataclass
class MetricsReport:
    names: tuple[str, ...]
    iou: np.ndarray
    accuracy: np.ndarray
    miou: float
    pixel_accuracy: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, classes: ClassSet) -> "MetricsReport":
        glob, per_class = pixel_accuracy(cm)
        return cls(classes.names, iou_per_class(cm), per_class, mean_iou(cm), glob)

    def to_dict(self) -> dict:
        def num(v):
            return None if np.isnan(v) else float(v)

        per_class = [
            {"name": n, "iou": num(i), "accuracy": num(a), "defined": bool(not np.isnan(i))}
            for n, i, a in zip(self.names, self.iou, self.accuracy)
        ]
        return {"per_class": per_class, "miou": self.miou, "pixel_accuracy": self.pixel_accuracy, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        cols = [n[:10] for n in self.names]
        head = " ".join(f"{c:>10}" for c in cols)
        vals = " ".join(f"{'-':>10}" if np.isnan(v) else f"{100 * v:>10.1f}" for v in self.iou)
        return (
            f"{'IoU (%)':<10} {head} {'mIoU':>7} {'PixAcc':>7}\n"
            f"{'':<10} {vals} {100 * self.miou:>7.1f} {100 * self.pixel_accuracy:>7.1f}"
        )
