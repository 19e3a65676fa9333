"""Command-line entry point: ``renet <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from renet.data import (
    DatasetConfig,
    FormatError,
    SyntheticHandSpec,
    dataset_stats,
    format_kv,
    generate_synthetic,
    load_checkpoint,
    load_samples,
    parse_kv_lines,
    read_depth,
    read_manifest,
    save_checkpoint,
    write_dataset,
)
from renet.evaluation import (
    DEFAULT_THRESHOLDS,
    MULTIVIEW_OFFSET_MM,
    bagging_predict,
    evaluate,
    multiview_predict,
    parse_layer_stack,
    receptive_field,
)
from renet.geometry import AugmentRanges, DepthFrame, crop_patch, denormalize_labels, segment_and_center
from renet.nn import ModelConfig, RegionSpec, build_model, layer_stack
from renet.tensor import RngStream
from renet.train import TrainConfig, TrainingDiverged, train, write_loss_csv

log = logging.getLogger("renet")


class UsageError(Exception):
    """Bad flags, config keys or input files (exit code 2)."""


# -- run configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    # model
    architecture: str = "basic-residual"
    head: str = "region-ensemble"
    regions: str = "nine"
    fc_width: int = 2048
    dropout: float = 0.5
    channels: str = "16,32,64"
    input_size: int = 96
    out_init_scale: float = 1.0
    # optimisation
    batch_size: int = 128
    base_lr: float = 0.005
    lr_step_epochs: int = 20
    lr_factor: float = 0.1
    epochs: int = 80
    momentum: float = 0.9
    weight_decay: float = 0.0005
    loss: str = "smooth-l1"
    augment: bool = True
    aug_translate: float = 10.0
    aug_scale: str = "0.9,1.1"
    aug_rotate: float = 180.0
    aug_flip_prob: float = 0.0
    seed: int = 0
    # artifacts
    train_manifest: str = ""
    test_manifest: str = ""
    out: str = "run"
    save_every: int = 0

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def updated(self, raw):
        """Copy with string values from ``raw`` parsed to the field types."""
        types = {f.name: type(f.default) for f in dataclasses.fields(self)}
        kw = {}
        for key, value in raw.items():
            k = key.replace("-", "_")
            if k not in types:
                raise UsageError(f"unknown config key {key!r}")
            t = types[k]
            try:
                if t is bool:
                    low = str(value).lower()
                    if low not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(value)
                    kw[k] = low in ("1", "true", "yes")
                else:
                    kw[k] = t(value)
            except ValueError:
                raise UsageError(f"bad value {value!r} for {k} (expected {t.__name__})") from None
        return dataclasses.replace(self, **kw)

    def to_kv(self):
        return {k: str(v) for k, v in dataclasses.asdict(self).items()}

    def model_config(self, joints):
        try:
            channels = tuple(int(c) for c in self.channels.split(","))
        except ValueError:
            raise UsageError(f"bad channels {self.channels!r}") from None
        return ModelConfig(self.architecture, self.head, self.regions, joints, self.fc_width,
                           self.dropout, channels, self.input_size)

    def train_config(self, mirror=()):
        lo, hi = (float(v) for v in self.aug_scale.split(","))
        ranges = AugmentRanges(self.aug_translate, (lo, hi), self.aug_rotate, self.aug_flip_prob, tuple(mirror))
        return TrainConfig(self.batch_size, self.base_lr, self.lr_step_epochs, self.lr_factor, self.epochs,
                           self.momentum, self.weight_decay, self.loss, self.augment, ranges, self.seed)


def load_run_config(path, overrides):
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            cfg = cfg.updated(parse_kv_lines(p.read_text().splitlines(), str(p)))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return cfg.updated(overrides)


def parse_overrides(extra):
    """``--key value`` pairs left over by argparse."""
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"missing value for {tok}")
        out[key] = value
    return out


def _manifest(path):
    if not path:
        raise UsageError("no manifest given")
    if not Path(path).is_file():
        raise UsageError(f"manifest {path} not found")
    try:
        return read_manifest(path)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad manifest {path}: {exc}") from None


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except (FormatError, ValueError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- training ---------------------------------------------------------------------

def init_model(cfg, joints):
    """Freshly initialised model for a RunConfig; the seed fixes the weights."""
    return build_model(cfg.model_config(joints), RngStream(cfg.seed).spawn(3), out_scale=cfg.out_init_scale)


def fit(cfg, manifest, out=None):
    """Train one model from a RunConfig; returns (model, history, checkpoint extras)."""
    model = init_model(cfg, manifest.config.joints)
    train_cfg = cfg.train_config(manifest.config.mirror)
    samples = load_samples(manifest, model.config.input_size)
    extra = {f"dataset.{k}": v for k, v in manifest.config.to_dict().items()}
    per_epoch = -(-len(samples) // train_cfg.batch_size)

    def on_batch(rec):
        if out is not None and cfg.save_every and rec.batch == per_epoch - 1 and (rec.epoch + 1) % cfg.save_every == 0:
            save_checkpoint(out / f"epoch{rec.epoch + 1:04d}.ckpt", model, extra)

    history = train(model, samples, train_cfg, on_batch)
    return model, history, extra


def cmd_train(args, overrides):
    cfg = load_run_config(args.config, overrides)
    manifest = _manifest(cfg.train_manifest)
    out = _outdir(cfg.out)
    (out / "config.txt").write_text(format_kv(cfg.to_kv()))
    model, history, extra = fit(cfg, manifest, out)
    save_checkpoint(out / "model.ckpt", model, extra)
    write_loss_csv(history, out / "loss.csv")
    print(f"trained {cfg.epochs} epochs, final batch loss {history[-1].loss:.6g}; wrote {out / 'model.ckpt'}")
    return 0


# -- evaluation -------------------------------------------------------------------

def predict_manifest(model, manifest, multiview=None, bag=()):
    """World-mm poses for every frame, one forward pass per frame."""
    cfg = manifest.config
    preds = []
    for i in range(len(manifest)):
        frame = manifest.frame(i)
        center = segment_and_center(frame, cfg.near, cfg.far)
        if multiview is not None:
            preds.append(multiview_predict(model, frame, center, cfg.extent, multiview))
            continue
        sample = crop_patch(frame, center, cfg.extent, model.config.input_size)
        preds.append(bagging_predict([model, *bag], sample))
    return np.stack(preds)


def read_predictions(path, frames, joints):
    try:
        rows = np.loadtxt(path, ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad predictions file {path}: {exc}") from None
    if rows.shape != (frames, 3 * joints):
        raise UsageError(f"predictions file has shape {rows.shape}, expected ({frames}, {3 * joints})")
    return rows.reshape(frames, joints, 3)


def cmd_eval(args, overrides):
    if overrides:
        raise UsageError(f"unexpected arguments {sorted(overrides)}")
    manifest = _manifest(args.manifest)
    J = manifest.config.joints
    if args.predictions:
        if args.checkpoint or args.bag or args.multiview is not None:
            raise UsageError("--predictions cannot be combined with model flags")
        preds = read_predictions(args.predictions, len(manifest), J)
    else:
        paths = ([args.checkpoint] if args.checkpoint else []) + list(args.bag or [])
        if not paths:
            raise UsageError("give --checkpoint, --bag or --predictions")
        models = [_checkpoint(p)[0] for p in paths]
        for p, m in zip(paths, models):
            if m.config.joints != J:
                raise UsageError(f"{p} predicts {m.config.joints} joints but the manifest has {J}")
        if args.multiview is not None and len(models) > 1:
            raise UsageError("--multiview and --bag are separate baselines; use one")
        preds = predict_manifest(models[0], manifest, args.multiview, models[1:])
    fingertips = None
    if args.mp:
        fingertips = manifest.config.fingertips
        if not fingertips:
            raise UsageError("--mp needs 'fingertips' in the manifest header")
    report = evaluate(preds, manifest.poses(), DEFAULT_THRESHOLDS, fingertips,
                      map_threshold=100.0 if args.map else None)
    out = _outdir(args.out)
    report.write(out)
    resolved = {k: str(v) for k, v in vars(args).items() if k not in ("func",)}
    (out / "config.txt").write_text(format_kv(resolved))
    print(f"mean 3D error {report.overall_error:.4f} mm over {len(preds)} frames")
    if report.mp is not None:
        print(f"mP {report.mp:.4f}")
    if report.map_mean is not None:
        print(f"mAP {report.map_mean:.4f}")
    return 0


def cmd_predict(args, overrides):
    if overrides:
        raise UsageError(f"unexpected arguments {sorted(overrides)}")
    model, meta = _checkpoint(args.checkpoint)
    ds = {k[8:]: v for k, v in meta.items() if k.startswith("dataset.")}
    if not ds:
        raise UsageError("checkpoint carries no dataset config (camera, extent)")
    dcfg = DatasetConfig.from_dict(ds)
    try:
        depth = read_depth(args.depth)
    except OSError as exc:
        raise UsageError(f"cannot read {args.depth}: {exc}") from None
    except FormatError as exc:
        raise UsageError(f"bad depth file {args.depth}: {exc}") from None
    frame = DepthFrame(depth, dcfg.intrinsics)
    if args.center:
        try:
            center = np.array([float(v) for v in args.center.split(",")])
        except ValueError:
            center = np.zeros(0)
        if center.shape != (3,):
            raise UsageError(f"--center wants x,y,z in mm, got {args.center!r}")
    else:
        center = segment_and_center(frame, dcfg.near, dcfg.far)
    sample = crop_patch(frame, center, dcfg.extent, model.config.input_size)
    pose = denormalize_labels(model.predict(sample.patch[None])[0], center, dcfg.extent)
    line = " ".join(repr(float(v)) for v in pose.reshape(-1))
    if args.out:
        Path(args.out).write_text(line + "\n")
    print(line)
    return 0


# -- data -------------------------------------------------------------------------

def cmd_gen_data(args, overrides):
    raw = {}
    if args.spec:
        if not Path(args.spec).is_file():
            raise UsageError(f"spec file {args.spec} not found")
        raw.update(parse_kv_lines(Path(args.spec).read_text().splitlines(), args.spec))
    raw.update({k.replace("-", "_"): v for k, v in overrides.items()})
    try:
        spec = SyntheticHandSpec.from_dict(raw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    samples = generate_synthetic(spec, args.n, RngStream(args.seed))
    config = DatasetConfig(spec.intrinsics, spec.joints, fingertips=spec.fingertip_indices())
    out = _outdir(args.out)
    path = write_dataset(out, samples, config)
    resolved = {f.name: repr(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
    resolved.update(n=str(args.n), seed=str(args.seed))
    (out / "config.txt").write_text(format_kv(resolved))
    print(f"wrote {args.n} frames to {path}")
    return 0


def cmd_stats(args, overrides):
    if overrides:
        raise UsageError(f"unexpected arguments {sorted(overrides)}")
    st = dataset_stats(_manifest(args.manifest))
    print(f"frames {st.frames}")
    print(f"joints {st.joints}")
    print(f"depth_mm {st.depth_min:g} {st.depth_max:g}")
    for axis, lo, hi in zip("xyz", st.label_min, st.label_max):
        print(f"label_{axis}_mm {lo:.3f} {hi:.3f}")
    return 0


# -- receptive fields -----------------------------------------------------------------

def cmd_rf(args, overrides):
    cfg = load_run_config(args.config, overrides)
    model_cfg = cfg.model_config(16)
    try:
        stack = parse_layer_stack(args.layers) if args.layers else layer_stack(model_cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    F = model_cfg.input_size
    for kind, _, stride, _ in stack:
        if kind == "pool":
            F //= stride
    try:
        regions = model_cfg.region_spec() if not args.regions else RegionSpec.resolve(args.regions, F)
        regions.validate(F)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["region", "row", "col", "height", "width", "rows_px", "cols_px", "rf"])
    for i, region in enumerate(regions):
        rf = receptive_field(stack, region, model_cfg.input_size)
        w.writerow([i, *region, f"{rf.rows[0]}-{rf.rows[1]}", f"{rf.cols[0]}-{rf.cols[1]}",
                    f"{rf.height}x{rf.width}"])
    return 0


# -- ablation ---------------------------------------------------------------------------

ABLATION_LADDER = (
    ("shallow", {"architecture": "shallow", "loss": "l2", "augment": False, "head": "single"}),
    ("deeper", {"architecture": "basic"}),
    ("residual", {"architecture": "basic-residual"}),
    ("smooth-l1", {"loss": "smooth-l1"}),
    ("augmentation", {"augment": True}),
    ("region-ensemble", {"head": "region-ensemble"}),
)


def ablation_configs(base):
    """The six cumulative rungs; each changes exactly one flag from its predecessor."""
    rungs, cur = [], base
    for name, change in ABLATION_LADDER:
        cur = dataclasses.replace(cur, **change)
        rungs.append((name, cur))
    return rungs


def cmd_ablate(args, overrides):
    cfg = load_run_config(args.config, overrides)
    train_m = _manifest(cfg.train_manifest)
    test_m = _manifest(cfg.test_manifest) if cfg.test_manifest else train_m
    out = _outdir(cfg.out)
    (out / "config.txt").write_text(format_kv(cfg.to_kv()))
    rows = []
    for i, (name, rung) in enumerate(ablation_configs(cfg)):
        log.info("rung %d: %s", i + 1, name)
        model, _, _ = fit(rung, train_m)
        preds = predict_manifest(model, test_m)
        err = evaluate(preds, test_m.poses()).overall_error
        rows.append([i + 1, name, rung.architecture, rung.head, rung.loss, str(rung.augment).lower(), repr(err)])
        print(f"{i + 1} {name}: {err:.3f} mm", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rung", "name", "architecture", "head", "loss", "augment", "mean_error_mm"])
        w.writerows(rows)
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="renet", description="Region ensemble network for depth-image pose regression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; extra --key value pairs override the config file")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file on a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="text file, one frame per line, 3J world-mm values")
    e.add_argument("--bag", nargs="+", metavar="CKPT", help="further checkpoints averaged with --checkpoint")
    e.add_argument("--multiview", type=float, nargs="?", const=MULTIVIEW_OFFSET_MM, metavar="D_MM")
    e.add_argument("--mp", action="store_true", help="fingertip mean precision at 15 mm")
    e.add_argument("--map", action="store_true", help="per-joint detection rate at 100 mm")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict world-mm joints for one depth file")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--depth", required=True)
    pr.add_argument("--center", help="x,y,z crop center in mm; skips segmentation")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("gen-data", help="render a synthetic hand dataset")
    g.add_argument("--spec")
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("stats", help="summarize a manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_stats)

    r = sub.add_parser("rf", help="receptive field of every region")
    r.add_argument("--config")
    r.add_argument("--layers", help="custom stack, e.g. conv:3:1:1,pool:2:2:0")
    r.add_argument("--regions", help="region preset or r,c,h,w;... list")
    r.set_defaults(func=cmd_rf)

    a = sub.add_parser("ablate", help="train and score the six incremental-strategy rungs")
    a.add_argument("--config")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, parse_overrides(extra))
    except UsageError as exc:
        print(f"renet {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"renet {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"renet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
