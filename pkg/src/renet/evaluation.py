"""Pose metrics, receptive fields and the ensemble inference baselines."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from renet.geometry import crop_patch, denormalize_labels

log = logging.getLogger(__name__)

MULTIVIEW_OFFSET_MM = 26.5625
DEFAULT_THRESHOLDS = tuple(float(t) for t in range(81))


def _errors(preds, gts):
    """(frames, joints) Euclidean distances in mm."""
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.ndim == 2:
        p, g = p.reshape(len(p), -1, 3), g.reshape(len(g), -1, 3)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if len(p) == 0:
        raise ValueError("no frames to evaluate")
    return np.sqrt(((p - g) ** 2).sum(axis=-1))


def mean_3d_error(preds, gts):
    """Per-joint mean distance (mm) and their mean."""
    per_joint = _errors(preds, gts).mean(axis=0)
    return per_joint, float(per_joint.mean())


def success_frame_curve(preds, gts, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of frames whose worst joint error is strictly below each threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("no thresholds given")
    if (np.diff(thresholds) < 0).any():
        raise ValueError("thresholds must be sorted ascending")
    worst = _errors(preds, gts).max(axis=1)
    return [(float(t), float((worst < t).mean())) for t in thresholds]


def mean_precision_fingertips(preds, gts, fingertips, threshold=15.0):
    """Mean over fingertip joints of the per-joint detection rate (error < threshold)."""
    fingertips = list(fingertips)
    if not fingertips:
        raise ValueError("fingertip index list is empty")
    err = _errors(preds, gts)
    if min(fingertips) < 0 or max(fingertips) >= err.shape[1]:
        raise ValueError(f"fingertip indices {fingertips} out of range for {err.shape[1]} joints")
    return float((err[:, fingertips] < threshold).mean(axis=0).mean())


def mean_average_precision(preds, gts, threshold=100.0):
    """Per-joint detection rate at ``threshold`` mm and its mean over joints."""
    rates = (_errors(preds, gts) < threshold).mean(axis=0)
    return rates, float(rates.mean())


@dataclass
class EvalReport:
    per_joint_error: np.ndarray
    overall_error: float
    success_curve: list
    mp: float | None = None
    map_per_joint: np.ndarray | None = None
    map_mean: float | None = None

    def write(self, outdir):
        """Write per_joint_error.csv, success_curve.csv and metrics.csv into ``outdir``."""
        with open(outdir / "per_joint_error.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["joint", "mean_error_mm"])
            for j, e in enumerate(self.per_joint_error):
                w.writerow([j, repr(float(e))])
            w.writerow(["overall", repr(self.overall_error)])
        with open(outdir / "success_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold_mm", "fraction"])
            for t, f in self.success_curve:
                w.writerow([repr(t), repr(f)])
        with open(outdir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["mean_error_mm", repr(self.overall_error)])
            if self.mp is not None:
                w.writerow(["mP", repr(self.mp)])
            if self.map_mean is not None:
                for j, r in enumerate(self.map_per_joint):
                    w.writerow([f"AP_joint{j}", repr(float(r))])
                w.writerow(["mAP", repr(self.map_mean)])


def evaluate(preds, gts, thresholds=DEFAULT_THRESHOLDS, fingertips=None, mp_threshold=15.0,
             map_threshold=None):
    per_joint, overall = mean_3d_error(preds, gts)
    report = EvalReport(per_joint, overall, success_frame_curve(preds, gts, thresholds))
    if fingertips is not None:
        report.mp = mean_precision_fingertips(preds, gts, fingertips, mp_threshold)
    if map_threshold is not None:
        report.map_per_joint, report.map_mean = mean_average_precision(preds, gts, map_threshold)
    return report


@dataclass(frozen=True)
class ReceptiveField:
    rows: tuple
    cols: tuple

    @property
    def height(self):
        return self.rows[1] - self.rows[0] + 1

    @property
    def width(self):
        return self.cols[1] - self.cols[0] + 1


def layer_geometry(stack):
    """Return ``(jump, span, pad_total)`` of the last layer of a conv/pool stack."""
    jump, span, pad_total = 1, 1, 0
    for layer in stack:
        kind, k, stride, pad = layer
        if kind not in ("conv", "pool"):
            raise ValueError(f"unknown layer kind {kind!r} (expected 'conv' or 'pool')")
        if k < 1 or stride < 1 or pad < 0:
            raise ValueError(f"invalid layer {layer}")
        pad_total += pad * jump
        span += (k - 1) * jump
        jump *= stride
    return jump, span, pad_total


def receptive_field(stack, region, input_size=96):
    """Input-pixel interval covered by a feature-map window, clipped to the image.

    Cell ``i`` sees ``[i*jump - pad_total, i*jump - pad_total + span - 1]``.
    """
    jump, span, pad_total = layer_geometry(stack)
    row, col, h, w = region

    def interval(start, count):
        lo = start * jump - pad_total
        hi = (start + count - 1) * jump - pad_total + span - 1
        lo, hi = max(lo, 0), min(hi, input_size - 1)
        if lo > hi:
            raise ValueError(f"window starting at {start} lies outside the {input_size}px input")
        return (lo, hi)

    return ReceptiveField(interval(row, h), interval(col, w))


def parse_layer_stack(text):
    """Parse ``"conv:3:1:1,pool:2:2:0,..."`` (kind:kernel:stride:pad)."""
    stack = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 4:
            raise ValueError(f"layer {item!r} must be kind:kernel:stride:pad")
        kind = parts[0]
        if kind not in ("conv", "pool"):
            raise ValueError(f"unknown layer kind {kind!r} (expected 'conv' or 'pool')")
        stack.append((kind, *(int(v) for v in parts[1:])))
    return stack


def _predict_normalized(model, patches):
    return model.predict(np.stack(patches)).astype(np.float64)


def multiview_predict(model, frame, center, extent, d=MULTIVIEW_OFFSET_MM, out_size=None):
    """Average world-space poses from crops shifted by {-d, 0, d} mm in x and y.

    Coinciding crop centers (``d == 0``) are evaluated once.
    """
    out_size = out_size or model.config.input_size
    center = np.asarray(center, dtype=np.float64)
    offsets = sorted({(dx, dy) for dx in (-d, 0.0, d) for dy in (-d, 0.0, d)})
    poses, skipped = [], 0
    for dx, dy in offsets:
        c = center + np.array([dx, dy, 0.0])
        try:
            sample = crop_patch(frame, c, extent, out_size)
        except ValueError as exc:
            skipped += 1
            log.warning("multi-view crop at offset (%g, %g) failed: %s", dx, dy, exc)
            continue
        out = _predict_normalized(model, [sample.patch])[0]
        poses.append(denormalize_labels(out, c, extent))
    if not poses:
        raise ValueError("every multi-view crop failed")
    if skipped:
        log.warning("skipped %d of %d multi-view crops", skipped, len(offsets))
    return np.mean(poses, axis=0)


def bagging_predict(models, sample):
    """Mean of the models' poses for one cropped sample (averaged before denormalizing)."""
    if not models:
        raise ValueError("bagging needs at least one model")
    joints = {m.config.joints for m in models}
    if len(joints) != 1:
        raise ValueError(f"models disagree on joint count: {sorted(joints)}")
    outs = np.stack([_predict_normalized(m, [sample.patch])[0] for m in models])
    return denormalize_labels(outs.sum(axis=0) / len(models), sample.center, sample.extent)
