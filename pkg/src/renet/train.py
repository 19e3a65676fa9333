"""Losses, momentum SGD, step schedule and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from renet.geometry import AugmentRanges, augment
from renet.tensor import RngStream, Tensor, _node

log = logging.getLogger(__name__)

SMOOTH_L1_KNEE = 0.01


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 0.005
    lr_step_epochs: int = 20
    lr_factor: float = 0.1
    epochs: int = 80
    momentum: float = 0.9
    weight_decay: float = 0.0005
    loss: str = "smooth-l1"
    augment: bool = True
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr_step_epochs < 1:
            raise ValueError("batch_size, epochs and lr_step_epochs must be positive")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("base_lr, momentum and weight_decay must be non-negative")
        if not 0 < self.lr_factor < 1:
            raise ValueError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {sorted(LOSSES)}")


def _check_pair(pred, target):
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    if np.isnan(pred.data).any() or np.isnan(target).any():
        raise ValueError("loss inputs contain NaN")
    return target


def smooth_l1(pred, target):
    """Mean over all coordinates of 0.5 x^2 (|x| < 0.01) else 0.01 (|x| - 0.005)."""
    target = _check_pair(pred, target)
    x = pred.data.astype(np.float64) - target
    ax = np.abs(x)
    inner = ax < SMOOTH_L1_KNEE
    vals = np.where(inner, 0.5 * x * x, SMOOTH_L1_KNEE * (ax - 0.5 * SMOOTH_L1_KNEE))
    n = x.size
    grad = (np.where(inner, x, SMOOTH_L1_KNEE * np.sign(x)) / n).astype(pred.dtype)
    return _node(np.asarray(vals.mean(), dtype=pred.dtype), (pred,), lambda g: (g * grad,))


def l2_loss(pred, target):
    """Mean over all coordinates of 0.5 x^2."""
    target = _check_pair(pred, target)
    x = pred.data.astype(np.float64) - target
    grad = (x / x.size).astype(pred.dtype)
    return _node(np.asarray((0.5 * x * x).mean(), dtype=pred.dtype), (pred,), lambda g: (g * grad,))


LOSSES = {"smooth-l1": smooth_l1, "l2": l2_loss}


@dataclass
class OptimizerState:
    velocity: dict
    step: int = 0

    @classmethod
    def for_model(cls, model):
        return cls({name: np.zeros_like(p.data) for name, p in model.params.items()})


def sgd_step(model, state, lr, cfg):
    """Caffe-style update: v = m v - lr (g + wd w); w = w + v; then clear grads."""
    if set(state.velocity) != set(model.params):
        raise ValueError("optimizer state does not match the model's parameters")
    for name, p in model.params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient; run backward first")
    dtype = next(iter(model.params.values())).dtype.type
    lr, m, wd = dtype(lr), dtype(cfg.momentum), dtype(cfg.weight_decay)
    for name, p in model.params.items():
        v = state.velocity[name]
        step = p.grad + wd * p.data
        step *= lr
        v *= m
        v -= step
        p.data += v
        p.grad = np.zeros_like(p.data)
    state.step += 1


def lr_at(epoch, cfg):
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * cfg.lr_factor ** (epoch // cfg.lr_step_epochs)


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    batch: int
    lr: float
    loss: float


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "batch", "lr", "loss"])
        for r in history:
            w.writerow([r.epoch, r.batch, repr(r.lr), repr(r.loss)])


def _batch(samples, idx, cfg, epoch, seed):
    patches, labels = [], []
    for i in idx:
        s = samples[i]
        if cfg.augment:
            s = augment(s, RngStream(seed).spawn(1, epoch, i), cfg.ranges)
        patches.append(s.patch)
        labels.append(s.labels)
    return np.stack(patches)[:, None], np.stack(labels)


def train(model, samples, cfg, callback=None):
    """Run ``cfg.epochs`` of shuffled mini-batch SGD over labelled patch samples.

    ``callback(record)`` is invoked after every batch. Returns the loss history.
    """
    if not samples:
        raise ValueError("training set is empty")
    if any(s.labels is None for s in samples):
        raise ValueError("every training sample needs labels")
    loss_fn = LOSSES[cfg.loss]
    state = OptimizerState.for_model(model)
    dtype = next(iter(model.params.values())).dtype
    root = RngStream(cfg.seed)
    model.train()
    history = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = root.spawn(0, epoch).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            x, y = _batch(samples, order[start:start + cfg.batch_size], cfg, epoch, cfg.seed)
            # overflow is reported as divergence below, not as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                pred = model(Tensor(x, dtype=dtype), root.spawn(2, epoch, b))
                if not np.isfinite(pred.data).all():
                    raise TrainingDiverged(f"non-finite prediction at epoch {epoch}, batch {b}, lr {lr}")
                loss = loss_fn(pred, y)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr}")
                loss.backward()
                sgd_step(model, state, lr, cfg)
            rec = LossRecord(epoch, b, lr, value)
            history.append(rec)
            if callback is not None:
                callback(rec)
        log.debug("epoch %d lr %g last loss %g", epoch, lr, history[-1].loss)
    model.eval()
    return history

