"""Pinhole camera model, cube cropping, label normalization and augmentation.

Patch coordinates: a patch of size ``S`` covers normalized coordinates
``a`` in ``[-1, 1]`` on each axis, pixel ``j`` being centered at
``a = 2 (j + 0.5) / S - 1``. Normalized label ``x`` and patch coordinate ``a``
coincide for a joint at the crop depth, which is what the 2D augmentation
transform relies on. Rows grow downwards (camera ``y`` points down).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from renet import kernels


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass
class DepthFrame:
    """Depth image in millimeters, 0 marking missing measurements."""

    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        if self.depth.ndim != 2 or min(self.depth.shape) < 1:
            raise ValueError(f"depth must be a non-empty 2D array, got shape {self.depth.shape}")
        if (self.depth < 0).any():
            raise ValueError("depth values must be >= 0")

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]


class CropExtent(NamedTuple):
    """Half-extents of the crop box in millimeters."""

    x: float
    y: float
    z: float


HAND_EXTENT = CropExtent(75.0, 75.0, 75.0)
HUMAN_FRONT_EXTENT = CropExtent(400.0, 600.0, 400.0)
HUMAN_TOP_EXTENT = CropExtent(300.0, 300.0, 500.0)
EXTENT_PRESETS = {"hand": HAND_EXTENT, "human-front": HUMAN_FRONT_EXTENT, "human-top": HUMAN_TOP_EXTENT}


def parse_extent(text):
    """Preset name or ``"ex,ey,ez"`` half-extents."""
    text = str(text).strip()
    if text in EXTENT_PRESETS:
        return EXTENT_PRESETS[text]
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3 or min(vals) <= 0:
        raise ValueError(f"crop extent needs three positive half-extents, got {text!r}")
    return CropExtent(*vals)


@dataclass(frozen=True)
class AugmentRecord:
    shift_x: float = 0.0
    shift_y: float = 0.0
    scale: float = 1.0
    rotation: float = 0.0
    flip: bool = False


@dataclass(frozen=True)
class AugmentRanges:
    """Uniform draw ranges; translation in patch pixels, rotation in degrees.

    ``mirror`` lists (left, right) joint index pairs swapped under a flip.
    """

    translate: float = 10.0
    scale: tuple = (0.9, 1.1)
    rotate: float = 180.0
    flip_prob: float = 0.0
    mirror: tuple = ()

    def __post_init__(self):
        lo, hi = self.scale
        if self.translate < 0 or self.rotate < 0:
            raise ValueError("translate and rotate ranges must be >= 0")
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must satisfy 0 < min <= max, got {self.scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip probability must lie in [0, 1], got {self.flip_prob}")

    @classmethod
    def identity(cls):
        return cls(translate=0.0, scale=(1.0, 1.0), rotate=0.0, flip_prob=0.0)


@dataclass
class PatchSample:
    patch: np.ndarray
    labels: np.ndarray | None
    center: np.ndarray
    extent: CropExtent
    aug: AugmentRecord = field(default_factory=AugmentRecord)
    source: DepthFrame | None = field(default=None, repr=False)
    interpolation: str = "bilinear"


def project(world, K):
    x, y, z = (float(v) for v in world)
    if z <= 0:
        raise ValueError(f"cannot project a point with z={z} <= 0")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy, z)


def backproject(u, v, d, K):
    if d <= 0:
        raise ValueError(f"cannot backproject depth d={d} <= 0")
    return ((u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, float(d))


def project_points(points, K):
    """Vectorized :func:`project` for an (N, 3) array."""
    p = np.asarray(points, dtype=np.float64)
    if (p[:, 2] <= 0).any():
        raise ValueError("cannot project points with z <= 0")
    return np.stack([K.fx * p[:, 0] / p[:, 2] + K.cx, K.fy * p[:, 1] / p[:, 2] + K.cy, p[:, 2]], axis=1)


def segment_and_center(frame, near=100.0, far=1500.0):
    """Centroid (mm) of the backprojected pixels with ``near < depth < far``."""
    if not near < far:
        raise ValueError(f"need near < far, got near={near} far={far}")
    d = frame.depth.astype(np.float64)
    v, u = np.nonzero((d > near) & (d < far))
    if len(u) == 0:
        raise ValueError(f"no foreground between {near} and {far} mm: no hand in frame")
    K = frame.intrinsics
    z = d[v, u]
    return np.array([((u - K.cx) * z / K.fx).mean(), ((v - K.cy) * z / K.fy).mean(), z.mean()])


def normalize_labels(pose, center, extent):
    pose = np.asarray(pose, dtype=np.float64).reshape(-1, 3)
    return ((pose - np.asarray(center, dtype=np.float64)) / np.asarray(extent, dtype=np.float64)).reshape(-1)


def denormalize_labels(labels, center, extent):
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(labels).all():
        raise ValueError("labels must be finite")
    return labels * np.asarray(extent, dtype=np.float64) + np.asarray(center, dtype=np.float64)


def _rotation(deg):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    if deg == 0:
        c, s = 1.0, 0.0
    return np.array([[c, -s], [s, c]])


def _forward_matrix(rec):
    """2x2 linear part of the forward similarity in normalized coordinates."""
    flip = np.diag([-1.0, 1.0]) if rec.flip else np.eye(2)
    return _rotation(rec.rotation) @ flip / rec.scale


def _sample_grid(size, rec, with_scale):
    """Source normalized coordinates (ax, ay) for each output patch pixel.

    With ``with_scale`` false the zoom is left to the caller (crop box growth).
    """
    a = 2.0 * (np.arange(size) + 0.5) / size - 1.0
    ay, ax = np.meshgrid(a, a, indexing="ij")
    if rec == AugmentRecord():
        return ax, ay
    t = 2.0 * np.array([rec.shift_x, rec.shift_y]) / size
    flip = np.diag([-1.0, 1.0]) if rec.flip else np.eye(2)
    inv = flip @ _rotation(rec.rotation).T
    if with_scale:
        inv = inv * rec.scale
    px, py = ax - t[0], ay - t[1]
    return inv[0, 0] * px + inv[0, 1] * py, inv[1, 0] * px + inv[1, 1] * py


def _render(frame, center, extent, size, rec, interpolation):
    K = frame.intrinsics
    cz = float(center[2])
    if cz <= 0:
        raise ValueError(f"crop center must have z > 0, got {cz}")
    # scale augmentation zooms by enlarging the crop box
    ex, ey, ez = (float(e) * rec.scale for e in extent)
    half_u, half_v = ex * K.fx / cz, ey * K.fy / cz
    if 2 * half_u < 2 or 2 * half_v < 2:
        raise ValueError(f"crop window {2 * half_u:.2f}x{2 * half_v:.2f} px is degenerate (< 2 px)")
    uc, vc, _ = project(center, K)

    d = frame.depth.astype(np.float64)
    norm = (d - cz) / ez
    norm[(d == 0) | (np.abs(norm) > 1.0)] = 1.0  # far plane

    ax, ay = _sample_grid(size, rec, with_scale=False)
    us = np.ascontiguousarray(uc + ax * half_u)
    vs = np.ascontiguousarray(vc + ay * half_v)
    if interpolation == "nearest":
        ui, vi = np.floor(us + 0.5).astype(np.intp), np.floor(vs + 0.5).astype(np.intp)
        ok = (ui >= 0) & (ui < frame.width) & (vi >= 0) & (vi < frame.height)
        out = np.ones(us.shape)
        out[ok] = norm[vi[ok], ui[ok]]
    elif interpolation == "bilinear":
        out = kernels.bilinear_sample(norm, us, vs, 1.0)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def crop_patch(frame, center, extent=HAND_EXTENT, out_size=96, pose=None, interpolation="bilinear"):
    """Cut the metric cube ``center +- extent`` and resample it to ``out_size``."""
    center = np.asarray(center, dtype=np.float64)
    extent = CropExtent(*extent)
    patch = _render(frame, center, extent, out_size, AugmentRecord(), interpolation)
    labels = None if pose is None else normalize_labels(pose, center, extent)
    return PatchSample(patch, labels, center, extent, AugmentRecord(), frame, interpolation)


def transform_labels(labels, rec, size, mirror=()):
    """Apply the augmentation similarity to normalized 3J labels."""
    pts = np.asarray(labels, dtype=np.float64).reshape(-1, 3).copy()
    if rec.flip and mirror:
        perm = np.arange(len(pts))
        for left, right in mirror:
            perm[left], perm[right] = right, left
        pts = pts[perm]
    if rec == AugmentRecord():
        return pts.reshape(-1)
    m = _forward_matrix(rec)
    t = 2.0 * np.array([rec.shift_x, rec.shift_y]) / size
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = m[0, 0] * x + m[0, 1] * y + t[0]
    pts[:, 1] = m[1, 0] * x + m[1, 1] * y + t[1]
    pts[:, 2] = pts[:, 2] / rec.scale
    return pts.reshape(-1)


def draw_augmentation(rng, ranges):
    g = rng.generator()
    tx, ty = g.uniform(-ranges.translate, ranges.translate, 2)
    s = g.uniform(*ranges.scale)
    theta = g.uniform(-ranges.rotate, ranges.rotate)
    flip = bool(g.random() < ranges.flip_prob)
    return AugmentRecord(float(tx), float(ty), float(s), float(theta), flip)


def apply_augmentation(sample, rec, mirror=()):
    """Warp a cropped sample by ``rec``, resampling its source frame once."""
    size = sample.patch.shape[0]
    if sample.source is not None:
        patch = _render(sample.source, sample.center, sample.extent, size, rec, sample.interpolation)
    else:
        ax, ay = _sample_grid(size, rec, with_scale=True)
        us = np.ascontiguousarray((ax + 1.0) * size / 2 - 0.5)
        vs = np.ascontiguousarray((ay + 1.0) * size / 2 - 0.5)
        src = sample.patch.astype(np.float64)
        # depth offsets shrink with the zoom; the far plane stays far
        src = np.where(src >= 1.0, 1.0, src / rec.scale)
        patch = np.clip(kernels.bilinear_sample(src, us, vs, 1.0), -1, 1).astype(np.float32)
    labels = None if sample.labels is None else transform_labels(sample.labels, rec, size, mirror)
    return replace(sample, patch=patch, labels=labels, aug=rec)


def augment(sample, rng, ranges):
    """Random translation/scale/rotation (and optional flip) with matching labels."""
    if sample.labels is None:
        raise ValueError("augment needs a labelled sample")
    rec = draw_augmentation(rng, ranges)
    return apply_augmentation(sample, rec, ranges.mirror)
