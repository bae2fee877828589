"""Command-line entry point.

Settings resolve as command-line flag > ``--config`` file > built-in
default.  The config file is flat ``key=value`` text; keys are flag names
with or without leading dashes, ``-`` and ``_`` interchangeable, and ``#``
starts a comment.

Log records go to stderr as single lines ``time=... stage=... key=value``;
data goes to files only.
"""
import argparse
import contextlib
import json
import logging
import math
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from endovo.errors import ConfigurationError, EndoVOError

LOG = logging.getLogger("endovo")


def _fmt_value(v):
    if isinstance(v, float):
        return repr(round(v, 6)) if math.isfinite(v) else str(v)
    if isinstance(v, np.floating):
        return _fmt_value(float(v))
    s = str(v)
    return json.dumps(s) if (" " in s or "=" in s) else s


def log_event(stage, **kv):
    parts = [f"time={time.strftime('%Y-%m-%dT%H:%M:%S')}", f"stage={stage}"]
    parts += [f"{k}={_fmt_value(v)}" for k, v in kv.items()]
    LOG.info(" ".join(parts))


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    LOG.handlers[:] = [handler]
    LOG.setLevel(level)
    LOG.propagate = False


def _floats(text, n=None):
    vals = tuple(float(v) for v in str(text).split(","))
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config_file(path):
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{no}: expected key=value")
        key, val = (p.strip() for p in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = val
    return values


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="endovo", description="Monocular visual odometry for capsule endoscopy.",
                                formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value settings file (flags override it)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="stderr log level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset", formatter_class=fmt)
    g.add_argument("--class", dest="traj_class", default="sharp", choices=["incremental", "scan-with-loops", "sharp"],
                   help="trajectory motion class")
    g.add_argument("--frames", type=int, default=200, help="frames per trajectory")
    g.add_argument("--trajectories", type=int, default=7, help="number of trajectories")
    g.add_argument("--size", type=int, default=64, help="square frame size in pixels")
    g.add_argument("--seed", type=int, default=0, help="texture and trajectory seed")
    g.add_argument("--splits", type=lambda s: _floats(s, 3), default=(5, 1, 1), help="train,val,test ratios")
    g.add_argument("--length", type=float, default=None, help="path length per trajectory in metres")
    g.add_argument("--max-speed", type=float, default=None, help="metres per frame")
    g.add_argument("--max-angular-speed", type=float, default=None, help="radians per frame")
    g.add_argument("--out", required=True, help="dataset directory")

    s = sub.add_parser("sfs", help="shape-from-shading depth for one image", formatter_class=fmt)
    s.add_argument("--input", required=True, help="RGB or grayscale image")
    s.add_argument("--out", required=True, help="16-bit depth PNG; a .f32 sidecar is written next to it")
    s.add_argument("--iterations", type=int, default=50, help="Jacobi sweeps")
    s.add_argument("--light", type=lambda t: _floats(t, 3), default=(0.0, 0.0, 1.0), help="unit light direction")
    s.add_argument("--albedo", type=float, default=None, help="fixed albedo; default estimates it from the image")

    t = sub.add_parser("train", help="train the pose regressor", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoint and log")
    t.add_argument("--epochs", type=int, default=60, help="maximum epochs")
    t.add_argument("--lr", type=float, default=3e-4, help="Adam step size")
    t.add_argument("--beta", type=float, default=1.0, help="orientation loss weight")
    t.add_argument("--calibrate-beta", action="store_true",
                   help="run a beta=1 preliminary training, then retrain with the calibrated beta")
    t.add_argument("--hidden", type=int, default=64, help="LSTM hidden units")
    t.add_argument("--widths", default="8,16,32", help="per-block branch width (all four branches)")
    t.add_argument("--dropout", type=float, default=0.5, help="dropout rate before each LSTM")
    t.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")
    t.add_argument("--window", type=int, default=10, help="truncated BPTT window in frame pairs")
    t.add_argument("--batch-trajectories", type=int, default=1, help="trajectories per batch")
    t.add_argument("--precision", default="float32", choices=["float32", "float64"], help="parameter dtype")
    t.add_argument("--adam", default="combined", choices=["combined", "combined-eps-inside", "standard"],
                   help="Adam update form")
    t.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    t.add_argument("--strict-determinism", action="store_true", help="single-threaded BLAS, zero wall times in the log")

    i = sub.add_parser("infer", help="predict poses for a dataset split", formatter_class=fmt)
    i.add_argument("--checkpoint", required=True, help="checkpoint.evo from train")
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--out", required=True, help="directory for predicted pose CSVs")
    i.add_argument("--split", default="test", choices=["train", "val", "test"], help="dataset split to predict")
    i.add_argument("--depth-source", default="stored", choices=["stored", "sfs"],
                   help="read stored depth sidecars or recompute SfS depth")
    i.add_argument("--strict-determinism", action="store_true", help="single-threaded BLAS")

    e = sub.add_parser("eval", help="error-vs-length curves and reports", formatter_class=fmt)
    e.add_argument("--est", required=True, help="estimated poses CSV")
    e.add_argument("--gt", required=True, help="ground-truth poses CSV")
    e.add_argument("--bins", default=None, help="comma-separated lengths in metres; default 0.1 m steps")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--no-baselines", action="store_true", help="skip zero-motion and constant-velocity curves")
    e.add_argument("--align", default=None, choices=["se3", "sim3"], help="diagnostic alignment")

    c = sub.add_parser("calibrate-beta", help="beta from a beta=1 training log", formatter_class=fmt)
    c.add_argument("--log", required=True, help="training_log.csv of the preliminary run")

    m = sub.add_parser("smoke", help="tiny generate/train/infer/eval run", formatter_class=fmt)
    m.add_argument("--dir", required=True, help="working directory")
    m.add_argument("--size", type=int, default=32, help="frame size in pixels")
    m.add_argument("--hidden", type=int, default=16, help="LSTM hidden units")
    m.add_argument("--seed", type=int, default=0, help="run seed")
    return p


def _prescan(argv):
    """Find ``--config`` and the subcommand without full parsing."""
    path, command = None, None
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            path = argv[k + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
        elif command is None and tok in COMMANDS:
            command = tok
    return path, command


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values installed as defaults."""
    path, command = _prescan(argv)
    if path and command:
        subparser = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in read_config_file(path).items():
            dest = {"class": "traj_class"}.get(key, key)
            if dest not in actions or dest == "help":
                raise ConfigurationError(f"{path}: unknown setting {key!r} for {command}")
            a = actions[dest]
            try:
                if isinstance(a, argparse._StoreTrueAction):
                    defaults[dest] = _bool(raw)
                else:
                    defaults[dest] = a.type(raw) if a.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigurationError(f"{path}: bad value for {key}: {exc}") from None
            if a.choices is not None and defaults[dest] not in a.choices:
                raise ConfigurationError(f"{path}: {key} must be one of {list(a.choices)}")
            # satisfied by the file; a flag may still override it
            a.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


@contextlib.contextmanager
def determinism(strict):
    if strict:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    from endovo.pipeline import generate
    m = generate(args.out, args.traj_class, args.frames, args.trajectories, args.size, args.seed,
                 args.splits, args.length, args.max_speed, args.max_angular_speed, log=log_event)
    log_event("generate", out=args.out, trajectories=len(m.trajectories),
              means=",".join(f"{v:.6f}" for v in m.channel_means))


def write_depth_png(path, values, mask):
    from PIL import Image
    v = np.asarray(values, dtype=float)
    img = np.zeros(v.shape, dtype=np.uint16)
    if mask.any():
        lo, hi = v[mask].min(), v[mask].max()
        scale = 65535.0 / (hi - lo) if hi > lo else 0.0
        img = np.where(mask, np.rint((v - lo) * scale), 0).astype(np.uint16)
    Image.fromarray(img).save(path, format="PNG")


def cmd_sfs(args):
    from PIL import Image

    from endovo.sfs import SfSConfig, rgb_to_intensity, tsai_shah_depth
    from endovo.synth.dataset import write_f32
    try:
        with Image.open(args.input) as im:
            arr = np.asarray(im.convert("RGB"), dtype=float).transpose(2, 0, 1) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {args.input}: {exc}") from exc
    cfg = SfSConfig(light_direction=args.light, iterations=args.iterations,
                    albedo=args.albedo if args.albedo else 1.0, estimate_albedo=args.albedo is None)
    depth = tsai_shah_depth(rgb_to_intensity(arr), cfg)
    write_depth_png(args.out, depth.values, depth.valid_mask)
    sidecar = os.path.splitext(args.out)[0] + ".f32"
    write_f32(sidecar, depth.values)
    log_event("sfs", input=args.input, out=args.out, sidecar=sidecar, degenerate=depth.degenerate)


def train_run(data, out, net_cfg, train_cfg, log=log_event, tag=""):
    """Train on ``data`` and write ``checkpoint<tag>.evo`` and ``training_log<tag>.csv``."""
    from endovo.checkpoint import save_checkpoint
    from endovo.model import EndoVONet
    from endovo.synth.dataset import load_manifest, load_split
    from endovo.train import make_sequences, train

    manifest = load_manifest(data)
    if (net_cfg.height, net_cfg.width) != (manifest.height, manifest.width):
        net_cfg.height, net_cfg.width = manifest.height, manifest.width
        net_cfg.__post_init__()
    tr = make_sequences(load_split(manifest, "train"), manifest.channel_means, net_cfg.dtype)
    va = make_sequences(load_split(manifest, "val"), manifest.channel_means, net_cfg.dtype)
    net = EndoVONet(net_cfg, seed=train_cfg.seed)
    best, tlog = train(net, tr, va, train_cfg, log_fn=log)
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, f"checkpoint{tag}.evo")
    log_path = os.path.join(out, f"training_log{tag}.csv")
    extra = {"channel_means": [float(v) for v in manifest.channel_means], "beta": train_cfg.beta,
             "best_epoch": tlog.best_epoch}
    save_checkpoint(ckpt, net_cfg, best, extra)
    tlog.save(log_path)
    log("train", checkpoint=ckpt, log=log_path, best_epoch=tlog.best_epoch, epochs=len(tlog.records),
        initial_train_loss=tlog.initial_train_loss)
    return ckpt, tlog


def _net_config(args):
    from endovo.model import NetConfig
    widths = [int(w) for w in str(args.widths).split(",")]
    if len(widths) != 3:
        raise ConfigurationError("--widths needs three comma-separated values")
    return NetConfig(inception_widths=tuple((w,) * 4 for w in widths), lstm_hidden=args.hidden,
                     dropout_rate=args.dropout, precision=args.precision)


def cmd_train(args):
    from endovo.train import TrainConfig, calibrate_beta

    def cfg_for(beta):
        return TrainConfig(max_epochs=args.epochs, initial_lr=args.lr, patience=args.patience,
                           window=args.window, batch_trajectories=args.batch_trajectories, beta=beta,
                           seed=args.seed, strict=args.strict_determinism, adam_variant=args.adam)

    with determinism(args.strict_determinism):
        if args.calibrate_beta:
            _, prelim = train_run(args.data, args.out, _net_config(args), cfg_for(1.0), tag="_beta1")
            beta = calibrate_beta(prelim)
            log_event("calibrate-beta", beta=beta)
        else:
            beta = args.beta
        train_run(args.data, args.out, _net_config(args), cfg_for(beta))


def cmd_infer(args):
    from endovo.pipeline import infer
    with determinism(args.strict_determinism):
        written = infer(args.checkpoint, args.data, args.out, args.split, args.depth_source, log=log_event)
    log_event("infer", out=args.out, trajectories=len(written))


def cmd_eval(args):
    from endovo.pipeline import evaluate
    bins = None if args.bins is None else [float(b) for b in args.bins.split(",")]
    _, files = evaluate(args.est, args.gt, args.out, bins, not args.no_baselines, args.align, log=log_event)
    log_event("eval", out=args.out, files=len(files))


def cmd_calibrate_beta(args):
    from endovo.train import TrainingLog, calibrate_beta
    beta = calibrate_beta(TrainingLog.load(args.log))
    log_event("calibrate-beta", log=args.log, beta=beta)
    print(repr(beta))


def run_pipeline_smoke(workdir, size=32, hidden=16, seed=0, log=log_event):
    """generate -> train (2 epochs) -> infer -> eval on a tiny dataset.

    Returns a report dict; raises with a stage-tagged message on failure.
    """
    from endovo.model import NetConfig
    from endovo.pipeline import evaluate, generate, infer
    from endovo.train import TrainConfig

    report = {"stages": {}, "files": []}
    t0 = time.perf_counter()

    def stage(name, fn):
        try:
            out = fn()
        except Exception as exc:
            raise EndoVOError(f"smoke stage {name} failed: {exc}") from exc
        report["stages"][name] = round(time.perf_counter() - t0, 3)
        return out

    data = os.path.join(workdir, "data")
    stage("generate", lambda: generate(data, "sharp", 24, 3, size, seed, (1, 1, 1), log=log))
    net_cfg = NetConfig(height=size, width=size, inception_widths=((4,) * 4, (4,) * 4, (8,) * 4),
                        lstm_hidden=hidden, precision="float64")
    tcfg = TrainConfig(max_epochs=2, seed=seed, strict=True)
    ckpt, _ = stage("train", lambda: train_run(data, os.path.join(workdir, "model"), net_cfg, tcfg, log))
    pred_dir = os.path.join(workdir, "pred")
    written = stage("infer", lambda: infer(ckpt, data, pred_dir, "test", log=log))
    name, (rel, est) = next(iter(written.items()))
    gt = os.path.join(data, name, "poses.csv")
    _, files = stage("eval", lambda: evaluate(est, gt, os.path.join(workdir, "report"), [0.1, 0.2, 0.4], log=log))
    expected = [os.path.join(data, "manifest.json"), ckpt, os.path.join(workdir, "model", "training_log.csv"),
                rel, est] + list(files)
    missing = [f for f in expected if not os.path.isfile(f)]
    if missing:
        raise EndoVOError(f"smoke stage contracts: missing files {missing}")
    report["files"] = expected
    report["seconds"] = round(time.perf_counter() - t0, 3)
    return report


def cmd_smoke(args):
    with determinism(True):
        report = run_pipeline_smoke(args.dir, args.size, args.hidden, args.seed)
    log_event("smoke", seconds=report["seconds"], files=len(report["files"]))


COMMANDS = {
    "generate": cmd_generate,
    "sfs": cmd_sfs,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "calibrate-beta": cmd_calibrate_beta,
    "smoke": cmd_smoke,
}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = _apply_config(parser, argv)
    except EndoVOError as exc:
        _setup_logging("INFO")
        log_event("config", error=str(exc))
        return 2
    _setup_logging(args.log_level)
    try:
        COMMANDS[args.command](args)
    except (EndoVOError, OSError, ValueError) as exc:
        log_event(args.command, error=f"{type(exc).__name__}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
