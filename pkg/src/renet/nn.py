"""Feature extractors, regression heads and the region presets."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

import numpy as np

from renet.tensor import (
    ShapeError,
    Tensor,
    add,
    average,
    concat,
    conv2d,
    dropout,
    flatten,
    linear,
    maxpool2d,
    no_grad,
    relu,
    slice_region,
)

ARCHITECTURES = ("shallow", "basic", "basic-residual")
HEADS = ("single", "region-ensemble", "region-bagging")


@dataclass(frozen=True)
class RegionSpec:
    """Windows ``(row, col, height, width)`` over the final feature map."""

    regions: tuple

    def __post_init__(self):
        if not self.regions:
            raise ValueError("a region spec needs at least one region")
        object.__setattr__(self, "regions", tuple(tuple(int(v) for v in r) for r in self.regions))
        for r in self.regions:
            if len(r) != 4:
                raise ValueError(f"region {r} must be (row, col, height, width)")

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __str__(self):
        return ";".join(",".join(str(v) for v in r) for r in self.regions)

    def validate(self, feature_size):
        for row, col, h, w in self.regions:
            if h < 1 or w < 1 or row < 0 or col < 0 or row + h > feature_size or col + w > feature_size:
                raise ValueError(f"region ({row}, {col}, {h}, {w}) lies outside the "
                                 f"{feature_size}x{feature_size} feature map")

    @classmethod
    def resolve(cls, text, feature_size):
        """Build from a preset name or an explicit ``"r,c,h,w;r,c,h,w"`` list.

        Presets scale with the feature-map size ``F``:

        ``nine``        nine ``F/2`` windows: corners, edge centers, center
        ``four``        the four ``F/2`` corner windows
        ``nine-small``  nine-position pattern with ``F/3`` windows
        ``nine-large``  nine-position pattern with ``2F/3`` windows
        ``multiscale``  centered windows of size ``F``, ``2F/3``, ``F/3``
        ``full``        one window over the whole map

        ``"9xSxS"`` and ``"4xSxS"`` select the nine/four pattern with an explicit
        window size, e.g. ``9x6x6`` on a 12x12 map equals ``nine``.
        """
        F = feature_size
        name = text.strip().lower()
        m = re.fullmatch(r"([49])x(\d+)x(\d+)", name)
        if m:
            if m.group(2) != m.group(3):
                raise ValueError(f"region preset {text!r}: only square windows are supported")
            count, size = int(m.group(1)), int(m.group(2))
            spec = cls(_anchored(F, size, count))
        elif name == "nine":
            spec = cls(_anchored(F, F // 2, 9))
        elif name == "four":
            spec = cls(_anchored(F, F // 2, 4))
        elif name == "nine-small":
            spec = cls(_anchored(F, F // 3, 9))
        elif name == "nine-large":
            spec = cls(_anchored(F, 2 * F // 3, 9))
        elif name == "multiscale":
            spec = cls(tuple(((F - s) // 2, (F - s) // 2, s, s) for s in (F, 2 * F // 3, F // 3)))
        elif name == "full":
            spec = cls(((0, 0, F, F),))
        else:
            try:
                spec = cls(tuple(tuple(int(v) for v in part.split(",")) for part in name.split(";") if part))
            except ValueError:
                raise ValueError(f"unknown region preset {text!r}") from None
        spec.validate(F)
        return spec


def _anchored(F, size, count):
    if size < 1 or size > F:
        raise ValueError(f"window size {size} does not fit a {F}x{F} feature map")
    lo, mid, hi = 0, (F - size) // 2, F - size
    corners = [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]
    if count == 4:
        anchors = corners
    else:
        anchors = corners + [(lo, mid), (mid, lo), (mid, hi), (hi, mid), (mid, mid)]
    return tuple((r, c, size, size) for r, c in anchors)


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "basic-residual"
    head: str = "region-ensemble"
    regions: str = "nine"
    joints: int = 16
    fc_width: int = 2048
    dropout: float = 0.5
    channels: tuple = (16, 32, 64)
    input_size: int = 96

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.joints < 1:
            raise ValueError("joints must be >= 1")
        if self.fc_width < 1:
            raise ValueError("fc_width must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError("channels must be three positive stage widths")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8 (three 2x2 pools)")

    @property
    def feature_size(self):
        return self.input_size // 8

    def region_spec(self):
        if self.head == "single":
            return RegionSpec.resolve("full", self.feature_size)
        return RegionSpec.resolve(self.regions, self.feature_size)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channels"] = ",".join(str(c) for c in self.channels)
        return {k: str(v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in ("joints", "fc_width", "input_size"):
                v = int(v)
            elif f.name == "dropout":
                v = float(v)
            elif f.name == "channels" and isinstance(v, str):
                v = tuple(int(c) for c in v.split(","))
            kw[f.name] = v
        return cls(**kw)


def feature_stages(config):
    """Per pooling stage: ``(conv names, skip name or None)``.

    Every conv is 3x3/stride 1/pad 1 followed by ReLU; skips are 1x1 projections
    from the stage input, added before the stage's 2x2 max-pool.
    """
    if config.architecture == "shallow":
        return [(["conv1"], None), (["conv2"], None), (["conv3"], None)]
    residual = config.architecture == "basic-residual"
    return [
        (["conv1a", "conv1b"], None),
        (["conv2a", "conv2b"], "skip2" if residual else None),
        (["conv3a", "conv3b"], "skip3" if residual else None),
    ]


def layer_stack(config):
    """Main-path ``(kind, kernel, stride, pad)`` list, for receptive-field analysis."""
    stack = []
    for convs, _ in feature_stages(config):
        stack += [("conv", 3, 1, 1)] * len(convs)
        stack.append(("pool", 2, 2, 0))
    return stack


def _param_shapes(config):
    shapes = {}
    in_ch = 1
    for stage, (convs, skip) in enumerate(feature_stages(config)):
        out_ch = config.channels[stage]
        stage_in = in_ch
        for name in convs:
            shapes[f"{name}.weight"] = (out_ch, in_ch, 3, 3)
            shapes[f"{name}.bias"] = (out_ch,)
            in_ch = out_ch
        if skip:
            shapes[f"{skip}.weight"] = (out_ch, stage_in, 1, 1)
            shapes[f"{skip}.bias"] = (out_ch,)

    out_dim = 3 * config.joints
    c3, width = config.channels[2], config.fc_width
    regions = config.region_spec()
    for i, (_, _, h, w) in enumerate(regions):
        shapes[f"branch{i}.fc1.weight"] = (width, c3 * h * w)
        shapes[f"branch{i}.fc1.bias"] = (width,)
        shapes[f"branch{i}.fc2.weight"] = (width, width)
        shapes[f"branch{i}.fc2.bias"] = (width,)
        if config.head == "region-bagging":
            shapes[f"branch{i}.out.weight"] = (out_dim, width)
            shapes[f"branch{i}.out.bias"] = (out_dim,)
    if config.head == "region-ensemble":
        shapes["fusion.weight"] = (out_dim, width * len(regions))
        shapes["fusion.bias"] = (out_dim,)
    elif config.head == "single":
        shapes["out.weight"] = (out_dim, width)
        shapes["out.bias"] = (out_dim,)
    return shapes


def param_count(config):
    return sum(int(np.prod(s)) for s in _param_shapes(config).values())


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    training: bool = True

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, x, rng=None):
        return forward_head(self, forward_features(self, x), rng)

    def predict(self, patches, batch_size=64):
        """Normalized 3J outputs for an (N, S, S) or (N, 1, S, S) array, eval mode."""
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[:, None]
        was_training = self.training
        self.eval()
        dtype = self.params[next(iter(self.params))].dtype
        out = []
        try:
            with no_grad():
                for i in range(0, len(patches), batch_size):
                    x = Tensor(patches[i:i + batch_size], dtype=dtype)
                    out.append(self(x).data)
        finally:
            self.training = was_training
        return np.concatenate(out, axis=0)


def _is_output_layer(name):
    return name in ("fusion.weight", "out.weight") or name.endswith(".out.weight")


def build_model(config, rng, dtype=np.float32, out_scale=1.0):
    """He-normal weights (std sqrt(2 / fan_in)), zero biases.

    ``out_scale`` multiplies the std of the final regression layer only.
    """
    config.region_spec()  # validates the windows against the feature map
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in) * (out_scale if _is_output_layer(name) else 1.0)
            data = rng.normal(std, shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return Model(config, params)


def forward_features(model, x):
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"expected input batch x 1 x {cfg.input_size} x {cfg.input_size}, got {x.shape}")
    p = model.params
    for convs, skip in feature_stages(cfg):
        stage_in = x
        for name in convs:
            x = relu(conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, pad=1))
        if skip:
            x = add(x, conv2d(stage_in, p[f"{skip}.weight"], p[f"{skip}.bias"], stride=1, pad=0))
        x = maxpool2d(x, 2, 2)
    return x


def branch_forward(model, features, index, window, rng=None):
    """Slice -> flatten -> two FC+ReLU+dropout layers for one region."""
    p, cfg = model.params, model.config
    h = flatten(slice_region(features, *window))
    for fc in ("fc1", "fc2"):
        h = relu(linear(h, p[f"branch{index}.{fc}.weight"], p[f"branch{index}.{fc}.bias"]))
        h = dropout(h, cfg.dropout, model.training, rng)
    return h


def forward_head(model, features, rng=None):
    cfg = model.config
    F = cfg.feature_size
    if features.ndim != 4 or features.shape[1:] != (cfg.channels[2], F, F):
        raise ShapeError(f"expected features batch x {cfg.channels[2]} x {F} x {F}, got {features.shape}")
    if model.training and cfg.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an RngStream")
    p = model.params
    regions = cfg.region_spec()
    branches = [branch_forward(model, features, i, r, rng) for i, r in enumerate(regions)]
    if cfg.head == "region-ensemble":
        return linear(concat(branches, axis=1), p["fusion.weight"], p["fusion.bias"])
    if cfg.head == "region-bagging":
        return average([linear(h, p[f"branch{i}.out.weight"], p[f"branch{i}.out.bias"])
                        for i, h in enumerate(branches)])
    return linear(branches[0], p["out.weight"], p["out.bias"])
