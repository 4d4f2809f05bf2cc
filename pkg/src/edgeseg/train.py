"""Desk-scale training: per-pixel cross-entropy, AdamW, per-epoch logging."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataio import Sample
from .metrics import IGNORE_LABEL, ClassSet, ConfusionMatrix, MetricsReport, accumulate_confusion, argmax_mask
from .models import Model, forward
from .weightfile import save_weights

CSV_FIELDS = ("epoch", "loss", "pixel_acc", "miou", "seconds")


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray, ignore_label: int = IGNORE_LABEL):
    """Mean per-pixel cross-entropy over non-ignored pixels.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient of the loss
    with respect to ``logits`` (zero at ignored pixels).
    """
    if logits.ndim != 4:
        raise ValueError(f"logits must be (N, K, H, W), got {logits.shape}")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    valid = target != ignore_label
    bad = valid & ((target < 0) | (target >= k))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"target label {int(target[pos])} out of range [0, {k}) at {pos}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross-entropy undefined: every pixel carries the ignore label")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sum_e = e.sum(axis=1)
    safe_t = np.where(valid, target, 0)
    picked = np.take_along_axis(shifted, safe_t[:, None], axis=1)[:, 0]
    nll = np.log(sum_e) - picked
    loss = float(np.sum(nll[valid], dtype=np.float64) / count)
    grad = e / sum_e[:, None]
    np.put_along_axis(grad, safe_t[:, None], np.take_along_axis(grad, safe_t[:, None], axis=1) - 1, axis=1)
    grad *= (valid / count)[:, None].astype(grad.dtype)
    return loss, grad


# -------------------------------------------------------------------- AdamW


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(state: AdamWState, cfg: AdamWConfig, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """One decoupled-weight-decay Adam update; returns ``(new_params, new_state)``.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} differs from parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step rejected")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    decay = 1.0 - cfg.lr * cfg.weight_decay
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params[name] = (p * decay - cfg.lr * update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamWState(new_m, new_v, t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


# ----------------------------------------------------------------- training


@dataclass
class TrainData:
    images: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, H, W)
    classes: ClassSet

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], classes: ClassSet) -> "TrainData":
        if not samples:
            raise ValueError("dataset is empty")
        shapes = {s.mask.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"samples must share one spatial size for batching, got {sorted(shapes)}")
        return cls(np.concatenate([s.image for s in samples]), np.stack([s.mask for s in samples]), classes)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    pixel_acc: float
    miou: float
    seconds: float
    steps: int = 0
    batch_loss: float = float("nan")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def _check_compatible(model: Model, data: TrainData) -> None:
    if model.config.num_classes != data.classes.K:
        raise ValueError(
            f"model predicts {model.config.num_classes} classes but the dataset has {data.classes.K}"
        )
    model.check_input(data.images[:1].shape)


def train_step(model: Model, state: AdamWState, cfg: AdamWConfig, images, masks, ignore_label=IGNORE_LABEL, clip_norm=None):
    """Forward, backward, AdamW update and BN running-stat commit; returns (loss, state)."""
    values, stats = model.graph.run(model.weights, {"input": images}, training=True, keep=True)
    loss, dlogits = cross_entropy_loss(values[model.graph.output], masks, ignore_label)
    grads, _ = model.graph.backward(model.weights, values, {model.graph.output: dlogits}, training=True)
    if clip_norm:
        clip_global_norm(grads, clip_norm)
    params = {k: model.weights[k] for k in grads}
    new_params, state = adamw_step(state, cfg, params, grads)
    model.weights.update(new_params)
    for name, (mean, var) in stats.items():
        model.weights[f"{name}.running_mean"] = mean
        model.weights[f"{name}.running_var"] = var
    return loss, state


def evaluate(model: Model, data: TrainData, batch_size: int = 8) -> MetricsReport:
    """Eval-mode (running BN statistics) metrics over the whole dataset.

    The pixel-mean cross-entropy of the same pass is stored as ``extra["loss"]``.
    """
    _check_compatible(model, data)
    cm = ConfusionMatrix.zeros(data.classes.K)
    loss_sum, counted = 0.0, 0
    for start in range(0, len(data), batch_size):
        logits = forward(model, data.images[start : start + batch_size], training=False)
        masks = data.masks[start : start + batch_size]
        n = int(np.count_nonzero(masks != data.classes.ignore_label))
        if n:
            loss_sum += cross_entropy_loss(logits, masks, data.classes.ignore_label)[0] * n
            counted += n
        cm = accumulate_confusion(cm, argmax_mask(logits), masks, data.classes)
    report = MetricsReport.from_confusion(cm, data.classes)
    report.extra["loss"] = loss_sum / counted if counted else float("nan")
    return report


def train_epoch(
    model: Model,
    data: TrainData,
    cfg: AdamWConfig,
    state: AdamWState,
    seed: int = 0,
    epoch: int = 0,
    batch_size: int = 4,
    max_steps: Optional[int] = None,
    clip_norm: Optional[float] = None,
    timestamps: bool = True,
):
    """One shuffled pass (optionally cut short at ``max_steps``); returns ``(EpochLog, state)``."""
    _check_compatible(model, data)
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    t0 = time.perf_counter()
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    losses = []
    for start in range(0, len(data), batch_size):
        if max_steps is not None and len(losses) >= max_steps:
            break
        idx = order[start : start + batch_size]
        loss, state = train_step(model, state, cfg, data.images[idx], data.masks[idx], data.classes.ignore_label, clip_norm)
        losses.append(loss)
    report = evaluate(model, data)
    seconds = time.perf_counter() - t0 if timestamps else 0.0
    # loss, pixel_acc and miou all describe the epoch-end weights; the running
    # minibatch mean mixes several weight states and is kept only for reference
    log = EpochLog(
        epoch, float(report.extra["loss"]), report.pixel_accuracy, report.miou, seconds, len(losses), float(np.mean(losses))
    )
    return log, state


def train(
    model: Model,
    data: TrainData,
    cfg: AdamWConfig = AdamWConfig(),
    steps: Optional[int] = None,
    epochs: Optional[int] = None,
    batch_size: int = 4,
    seed: int = 0,
    log_csv: Optional[str | os.PathLike] = None,
    clip_norm: Optional[float] = None,
    timestamps: bool = True,
):
    """Train for ``steps`` optimizer steps or ``epochs`` passes; returns ``(logs, state)``."""
    if (steps is None) == (epochs is None):
        raise ValueError("give exactly one of steps or epochs")
    _check_compatible(model, data)
    params = {k: model.weights[k] for k in model.graph.param_shapes()}
    state = AdamWState.zeros_like(params)
    logs: list[EpochLog] = []
    writer = None
    fh = open(log_csv, "w", newline="") if log_csv else None
    try:
        if fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
        epoch = 0
        while True:
            remaining = None if steps is None else steps - state.t
            if (steps is not None and remaining <= 0) or (epochs is not None and epoch >= epochs):
                break
            log, state = train_epoch(model, data, cfg, state, seed, epoch, batch_size, remaining, clip_norm, timestamps)
            logs.append(log)
            if writer:
                writer.writerow(_fmt_row(log))
                fh.flush()
            epoch += 1
    finally:
        if fh:
            fh.close()
    return logs, state


def _fmt_row(log: EpochLog) -> dict:
    return {
        "epoch": log.epoch,
        "loss": f"{log.loss:.6f}",
        "pixel_acc": f"{log.pixel_acc:.6f}",
        "miou": f"{log.miou:.6f}",
        "seconds": f"{log.seconds:.3f}",
    }


def read_log_csv(path: str | os.PathLike) -> list[EpochLog]:
    with open(path, newline="") as fh:
        return [
            EpochLog(int(r["epoch"]), float(r["loss"]), float(r["pixel_acc"]), float(r["miou"]), float(r["seconds"]))
            for r in csv.DictReader(fh)
        ]


def loss_trend_ok(losses: Sequence[float], start: int = 2, window: int = 5, uptick: float = 0.05) -> bool:
    """True when, in every ``window``-epoch span after epoch ``start``, the loss rises
    at most once and by no more than ``uptick`` (relative)."""
    tail = list(losses[start:])
    for i in range(max(1, len(tail) - window + 1)):
        span = tail[i : i + window]
        rises = [(b - a) / a for a, b in zip(span, span[1:]) if b > a]
        if len(rises) > 1 or any(r > uptick for r in rises):
            return False
    return True


def save_checkpoint(model: Model, path: str | os.PathLike, state: AdamWState, cfg: AdamWConfig, epoch: int) -> Path:
    """Weight file at ``path`` plus a ``<path>.json`` sidecar; returns the sidecar path."""
    save_weights(model, path)
    sidecar = Path(str(path) + ".json")
    doc = {
        "step": state.t,
        "epoch": epoch,
        "optimizer": "adamw",
        "lr": cfg.lr,
        "wd": cfg.weight_decay,
        "config": model.config.to_dict(),
    }
    sidecar.write_text(json.dumps(doc, indent=2) + "\n")
    return sidecar
