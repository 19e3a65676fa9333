"""On-disk formats, the synthetic hand generator and dataset statistics.

Raw depth file (little-endian)::

    "RDEP" | u16 version | u32 width | u32 height | width*height u16 depth (mm, 0 = missing)

Checkpoint (little-endian)::

    "RENC" | u16 version | u32 config length | config text ("key = value" lines)
    | u32 parameter count
    | per parameter: u16 name length | name | u8 rank | rank * u32 dims | float32 data
    | u64 checksum (first 8 bytes of BLAKE2b over everything before it)

Manifest: ``key = value`` config lines, then one line per frame holding the
depth-file path (relative to the manifest) and 3J world-mm coordinates.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from renet.geometry import (
    HAND_EXTENT,
    CameraIntrinsics,
    CropExtent,
    DepthFrame,
    parse_extent,
    crop_patch,
    project_points,
    segment_and_center,
)
from renet.nn import Model, ModelConfig
from renet.tensor import Tensor

DEPTH_MAGIC = b"RDEP"
DEPTH_VERSION = 1
CKPT_MAGIC = b"RENC"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    pass


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


# -- raw depth -----------------------------------------------------------------

def encode_depth(depth):
    d = np.asarray(depth)
    if d.ndim != 2:
        raise ValueError("depth must be 2D")
    if not np.isfinite(d).all() or (d < 0).any() or (d > 65535).any():
        raise ValueError("depth values must fit in u16 millimeters")
    if (d != np.rint(d)).any():
        raise ValueError("depth values must be whole millimeters")
    h, w = d.shape
    payload = d.astype("<u2").tobytes()
    return DEPTH_MAGIC + struct.pack("<HII", DEPTH_VERSION, w, h) + payload


def decode_depth(buf):
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != DEPTH_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}", 0)
    version, w, h = r.unpack("<HII", "header")
    if version != DEPTH_VERSION:
        raise FormatError(f"unknown depth file version {version}", 4)
    need = 2 * w * h
    if len(buf) - r.pos != need:
        raise FormatError(f"payload is {len(buf) - r.pos} bytes, header implies {need}", r.pos)
    return np.frombuffer(r.take(need, "payload"), dtype="<u2").reshape(h, w).astype(np.float32)


def write_depth(path, depth):
    Path(path).write_bytes(encode_depth(depth))


def read_depth(path):
    return decode_depth(Path(path).read_bytes())


# -- manifests -----------------------------------------------------------------

@dataclass
class DatasetConfig:
    intrinsics: CameraIntrinsics
    joints: int = 16
    extent: CropExtent = HAND_EXTENT
    fingertips: tuple = ()
    mirror: tuple = ()
    near: float = 100.0
    far: float = 1500.0

    def to_dict(self):
        K = self.intrinsics
        d = {"fx": repr(K.fx), "fy": repr(K.fy), "cx": repr(K.cx), "cy": repr(K.cy),
             "joints": str(self.joints), "extent": ",".join(repr(float(e)) for e in self.extent),
             "near": repr(self.near), "far": repr(self.far)}
        if self.fingertips:
            d["fingertips"] = ",".join(str(i) for i in self.fingertips)
        if self.mirror:
            d["mirror"] = ",".join(f"{a}:{b}" for a, b in self.mirror)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            K = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))
        except KeyError as exc:
            raise ValueError(f"dataset config is missing {exc.args[0]!r}") from None
        return cls(
            intrinsics=K,
            joints=int(d.get("joints", 16)),
            extent=parse_extent(d.get("extent", "hand")),
            fingertips=tuple(int(i) for i in d["fingertips"].split(",")) if d.get("fingertips") else (),
            mirror=tuple(tuple(int(v) for v in p.split(":")) for p in d["mirror"].split(","))
            if d.get("mirror") else (),
            near=float(d.get("near", 100.0)),
            far=float(d.get("far", 1500.0)),
        )


@dataclass
class Manifest:
    config: DatasetConfig
    entries: list = field(default_factory=list)  # (relative path, (J, 3) pose)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def frame(self, i):
        path, _ = self.entries[i]
        return DepthFrame(read_depth(self.root / path), self.config.intrinsics)

    def pose(self, i):
        return self.entries[i][1]

    def poses(self):
        return np.stack([p for _, p in self.entries]) if self.entries else np.zeros((0, self.config.joints, 3))


def parse_kv_lines(lines, source="config"):
    """Parse ``key = value`` lines ('#' comments and blank lines ignored)."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def format_kv(d):
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def write_manifest(path, manifest):
    path = Path(path)
    lines = [format_kv(manifest.config.to_dict()), "\n"]
    for rel, pose in manifest.entries:
        coords = " ".join(repr(float(v)) for v in np.asarray(pose, dtype=np.float64).reshape(-1))
        lines.append(f"{rel} {coords}\n")
    path.write_text("".join(lines))


def read_manifest(path, check_files=True):
    path = Path(path)
    text = path.read_text().splitlines()
    header, body_start = [], len(text)
    for i, line in enumerate(text):
        bare = line.split("#", 1)[0].strip()
        if bare and "=" not in bare:
            body_start = i
            break
        header.append(line)
    config = DatasetConfig.from_dict(parse_kv_lines(header, str(path)))
    entries = []
    for n, line in enumerate(text[body_start:], body_start + 1):
        bare = line.split("#", 1)[0].strip()
        if not bare:
            continue
        parts = bare.split()
        coords = parts[1:]
        if len(coords) != 3 * config.joints:
            raise ValueError(f"{path}:{n}: expected {3 * config.joints} coordinates, got {len(coords)}")
        pose = np.array([float(v) for v in coords]).reshape(config.joints, 3)
        if not np.isfinite(pose).all():
            raise ValueError(f"{path}:{n}: non-finite coordinates")
        if check_files and not (path.parent / parts[0]).is_file():
            raise ValueError(f"{path}:{n}: depth file {parts[0]!r} not found")
        entries.append((parts[0], pose))
    return Manifest(config, entries, path.parent)


def load_samples(manifest, out_size, center=None):
    """Segment, center and crop every manifest frame into a labelled PatchSample."""
    cfg = manifest.config
    samples = []
    for i in range(len(manifest)):
        frame = manifest.frame(i)
        c = segment_and_center(frame, cfg.near, cfg.far) if center is None else center
        samples.append(crop_patch(frame, c, cfg.extent, out_size, manifest.pose(i)))
    return samples


# -- checkpoints ---------------------------------------------------------------

def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(model, extra=None):
    """Serialize parameters as float32; ``extra`` key/values join the config block."""
    cfg = dict(model.config.to_dict())
    for k, v in (extra or {}).items():
        cfg[f"meta.{k}"] = str(v)
    text = format_kv(cfg).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(text)), text,
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode_checkpoint(buf):
    """Return ``(model, meta)``; raises FormatError/ChecksumError on corruption."""
    if len(buf) < 12:
        raise FormatError("truncated checkpoint", len(buf))
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r}", 0)
    body, stored = buf[:-8], buf[-8:]
    if _checksum(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch", len(body))
    r = _Reader(body)
    r.take(4, "magic")
    version, cfg_len = r.unpack("<HI", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unknown checkpoint version {version}", 4)
    kv = parse_kv_lines(r.take(cfg_len, "config").decode().splitlines(), "checkpoint config")
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    config = ModelConfig.from_dict({k: v for k, v in kv.items() if not k.startswith("meta.")})
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode()
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        size = math.prod(dims) * 4
        data = np.frombuffer(r.take(size, f"data of {name}"), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = Tensor(data, requires_grad=True, dtype=np.float32)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes after parameters", r.pos)
    from renet.nn import _param_shapes

    expected = _param_shapes(config)
    if list(expected) != list(params) or any(expected[k] != params[k].shape for k in params):
        raise FormatError("parameter set does not match the stored model config")
    return Model(config, params, training=False), meta


def save_checkpoint(path, model, extra=None):
    Path(path).write_bytes(encode_checkpoint(model, extra))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# -- synthetic hands -----------------------------------------------------------

FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")


@dataclass
class SyntheticHandSpec:
    """Capsule hand: a palm sphere plus five two-segment fingers.

    Emitted joints (J = 16): palm center, then per finger (thumb, index,
    middle, ring, little) its root, middle joint and tip.
    """

    palm_radius: float = 28.0
    # finger roots on the palm, hand frame (x right, y down, z away from camera)
    roots: tuple = ((-28.0, 6.0, 0.0), (-15.0, -24.0, 0.0), (-2.0, -27.0, 0.0),
                    (11.0, -25.0, 0.0), (23.0, -19.0, 0.0))
    # resting directions (unit-normalized at use)
    directions: tuple = ((-0.8, -0.6, 0.0), (-0.15, -1.0, 0.0), (0.0, -1.0, 0.0),
                         (0.15, -1.0, 0.0), (0.35, -1.0, 0.0))
    lengths: tuple = ((26.0, 22.0), (32.0, 26.0), (35.0, 28.0), (32.0, 26.0), (26.0, 21.0))
    radii: tuple = ((9.0, 8.0), (8.5, 7.5), (8.5, 7.5), (8.0, 7.0), (7.5, 6.5))
    flex_range: tuple = (0.0, 80.0)      # degrees, per segment
    spread_range: tuple = (-12.0, 12.0)  # degrees, per finger
    roll_range: tuple = (-40.0, 40.0)    # in-plane hand rotation, degrees
    tilt_range: tuple = (-20.0, 20.0)    # out-of-plane rotation about x and y, degrees
    distance_range: tuple = (350.0, 450.0)
    offset_range: tuple = (-25.0, 25.0)  # lateral hand offset, mm
    width: int = 128
    height: int = 128
    fx: float = 180.0
    fy: float = 180.0
    cx: float = 63.5
    cy: float = 63.5
    max_retries: int = 50

    def __post_init__(self):
        if self.palm_radius <= 0 or min(min(r) for r in self.radii) <= 0 or min(min(l) for l in self.lengths) <= 0:
            raise ValueError("all radii and lengths must be positive")
        if not (len(self.roots) == len(self.directions) == len(self.lengths) == len(self.radii)):
            raise ValueError("finger tables must have matching lengths")

    @property
    def joints(self):
        return 1 + 3 * len(self.roots)

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @classmethod
    def from_dict(cls, d):
        kw = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k not in fields:
                raise ValueError(f"unknown synthetic-hand key {k!r}")
            default = fields[k].default
            if isinstance(default, tuple):
                groups = [g for g in v.split(";")]
                vals = [tuple(float(x) for x in g.split(",")) for g in groups]
                kw[k] = vals[0] if not isinstance(default[0], tuple) else tuple(vals)
            elif isinstance(default, int):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)

    def fingertip_indices(self):
        return tuple(3 + 3 * i for i in range(len(self.roots)))


def _rot(axis, deg):
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def hand_skeleton(spec, rng):
    """Draw one articulation + camera pose; return (joints (J,3), primitives)."""
    g = rng.generator()
    nf = len(spec.roots)
    spread = g.uniform(*spec.spread_range, nf)
    flex = g.uniform(*spec.flex_range, (nf, 2))
    roll = g.uniform(*spec.roll_range)
    tilt_x, tilt_y = g.uniform(*spec.tilt_range, 2)
    dist = g.uniform(*spec.distance_range)
    off = g.uniform(*spec.offset_range, 2)

    joints = [np.zeros(3)]
    capsules = []
    for f in range(nf):
        root = np.asarray(spec.roots[f], dtype=np.float64)
        d = np.asarray(spec.directions[f], dtype=np.float64)
        d = _rot("z", spread[f]) @ (d / np.linalg.norm(d))
        # flexion bends the finger towards the palm side (away from the camera)
        axis = np.cross(d, [0.0, 0.0, 1.0])
        axis /= np.linalg.norm(axis)
        pts = [root]
        cur = d
        for seg in range(2):
            cur = _axis_angle(axis, flex[f, seg]) @ cur
            pts.append(pts[-1] + spec.lengths[f][seg] * cur)
            capsules.append((pts[-2], pts[-1], spec.radii[f][seg]))
        joints += pts
    R = _rot("z", roll) @ _rot("x", tilt_x) @ _rot("y", tilt_y)
    t = np.array([off[0], off[1], dist])
    world = lambda p: R @ p + t  # noqa: E731
    joints = np.array([world(p) for p in joints])
    prims = [("sphere", world(np.zeros(3)), None, spec.palm_radius)]
    prims += [("capsule", world(a), world(b), r) for a, b, r in capsules]
    return joints, prims


def _axis_angle(axis, deg):
    t = math.radians(deg)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(t) * k + (1 - math.cos(t)) * (k @ k)


def pixel_rays(width, height, K):
    """Unit ray directions through every pixel center, and their z components."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    rd = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    rd /= np.linalg.norm(rd, axis=-1, keepdims=True)
    return rd


def ray_sphere(rd, center, radius):
    """Nearest positive hit distance along unit rays from the origin (inf on miss)."""
    b = rd @ center
    c = center @ center - radius * radius
    h = b * b - c
    t = np.where(h >= 0, b - np.sqrt(np.maximum(h, 0.0)), np.inf)
    return np.where(t > 0, t, np.inf)


def ray_capsule(rd, a, b, radius):
    """Nearest hit of unit rays from the origin with the capsule ``a``-``b``."""
    ba = b - a
    oa = -a
    baba = ba @ ba
    bard = rd @ ba
    baoa = ba @ oa
    rdoa = rd @ oa
    oaoa = oa @ oa
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - radius * radius * baba
    h = qb * qb - qa * qc
    with np.errstate(divide="ignore", invalid="ignore"):
        t_body = (-qb - np.sqrt(np.maximum(h, 0.0))) / qa
    y = baoa + t_body * bard
    body_ok = (h >= 0) & (qa > 1e-12) & (y > 0) & (y < baba) & (t_body > 0)
    t_caps = np.minimum(ray_sphere(rd, a, radius), ray_sphere(rd, b, radius))
    return np.where(body_ok, np.minimum(t_body, t_caps), t_caps)


def render_depth(prims, width, height, K):
    """Z-depth (mm) of the nearest primitive per pixel; 0 where nothing is hit."""
    rd = pixel_rays(width, height, K)
    t = np.full((height, width), np.inf)
    for kind, a, b, r in prims:
        hit = ray_sphere(rd, a, r) if kind == "sphere" else ray_capsule(rd, a, b, r)
        t = np.minimum(t, hit)
    depth = np.where(np.isfinite(t), t * rd[..., 2], 0.0)
    return np.rint(depth).astype(np.float32)


def generate_synthetic(spec, n, rng):
    """``n`` rendered frames with exact joint labels: list of (DepthFrame, pose)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    K = spec.intrinsics
    out = []
    for i in range(n):
        sub = rng.spawn(i)
        for _ in range(spec.max_retries):
            joints, prims = hand_skeleton(spec, sub)
            if (joints[:, 2] <= 0).any():
                continue
            uv = project_points(joints, K)
            margin = 2.0
            if (uv[:, 0] < margin).any() or (uv[:, 0] > spec.width - 1 - margin).any():
                continue
            if (uv[:, 1] < margin).any() or (uv[:, 1] > spec.height - 1 - margin).any():
                continue
            depth = render_depth(prims, spec.width, spec.height, K)
            if not (depth > 0).any():
                continue
            out.append((DepthFrame(depth, K), joints))
            break
        else:
            raise ValueError(f"sample {i}: hand left the image in {spec.max_retries} attempts")
    return out


def write_dataset(outdir, samples, config, prefix="frame"):
    """Write depth files plus ``manifest.txt`` into ``outdir``; return the manifest path."""
    outdir = Path(outdir)
    (outdir / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (frame, pose) in enumerate(samples):
        rel = f"frames/{prefix}{i:06d}.rdep"
        write_depth(outdir / rel, frame.depth)
        entries.append((rel, np.asarray(pose)))
    path = outdir / "manifest.txt"
    write_manifest(path, Manifest(config, entries, outdir))
    return path


@dataclass
class DatasetStats:
    frames: int
    joints: int
    depth_min: float
    depth_max: float
    label_min: np.ndarray
    label_max: np.ndarray


def dataset_stats(manifest):
    lo, hi = math.inf, -math.inf
    for i in range(len(manifest)):
        d = manifest.frame(i).depth
        valid = d[d > 0]
        if valid.size:
            lo, hi = min(lo, float(valid.min())), max(hi, float(valid.max()))
    poses = manifest.poses().reshape(-1, 3)
    if len(poses):
        pmin, pmax = poses.min(axis=0), poses.max(axis=0)
    else:
        pmin = pmax = np.full(3, np.nan)
    return DatasetStats(len(manifest), manifest.config.joints, lo, hi, pmin, pmax)
