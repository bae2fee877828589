"""End-to-end stages shared by the command line and the acceptance suite."""
import os
import time

import numpy as np

from endovo.checkpoint import load_checkpoint
from endovo.errors import ConfigurationError
from endovo.evalkit import (Trajectory, align_trajectory, constant_velocity_baseline, emit_reports, integrate_relative,
                            rmse_vs_length, zero_motion_baseline)
from endovo.model import EndoVONet, extract_pose
from endovo.synth.dataset import build_dataset, load_manifest, load_split, write_poses_csv
from endovo.synth.scene import SceneConfig
from endovo.synth.trajectory import TrajectorySpec

# mean metres per frame and speed limits used when no explicit length is given
CLASS_MOTION = {
    "incremental": (0.02, 0.05, 0.05),
    "scan-with-loops": (0.04, 0.1, 0.1),
    "sharp": (0.25, 0.45, 0.6),
}


def default_specs(traj_class, n_traj, frames, seed, length=None, max_speed=None, max_angular_speed=None):
    step, vmax, wmax = CLASS_MOTION[traj_class]
    length = step * (frames - 1) if length is None else length
    return [TrajectorySpec(traj_class, length, frames,
                           vmax if max_speed is None else max_speed,
                           wmax if max_angular_speed is None else max_angular_speed,
                           seed=seed * 1000 + k)
            for k in range(n_traj)]


def generate(out, traj_class="sharp", frames=200, trajectories=7, size=64, seed=0, splits=(5, 1, 1),
             length=None, max_speed=None, max_angular_speed=None, log=None):
    specs = default_specs(traj_class, trajectories, frames, seed, length, max_speed, max_angular_speed)
    scene = SceneConfig(height=size, width=size, texture_seed=seed)
    return build_dataset(scene, specs, splits, out, log=log)


def predict_relatives(net: EndoVONet, pairs, chunk=50):
    """Run one trajectory's pairs ``[F-1,8,H,W]`` with state threaded through.

    Returns ``(x[F-1,3], q[F-1,4], seconds_per_pair)``.
    """
    states = None
    raws = []
    t0 = time.perf_counter()
    for start in range(0, len(pairs), chunk):
        raw, states, _ = net.forward(pairs[start:start + chunk, None], states, train=False)
        raws.append(raw[:, 0])
    elapsed = time.perf_counter() - t0
    poses = [extract_pose(r) for r in np.concatenate(raws)]
    x = np.array([p.x for p in poses]).reshape(-1, 3)
    q = np.array([p.q for p in poses]).reshape(-1, 4)
    return x, q, elapsed / max(len(pairs), 1)


def infer(checkpoint, data, out, split="test", depth_source="stored", log=None):
    """Write ``<traj>_relative.csv`` and ``<traj>_poses.csv`` for every trajectory of ``split``.

    Absolute poses start from the trajectory's first recorded pose.
    """
    cfg, params, extra = load_checkpoint(checkpoint)
    manifest = load_manifest(data)
    if (cfg.height, cfg.width) != (manifest.height, manifest.width):
        raise ConfigurationError(
            f"checkpoint expects {cfg.height}x{cfg.width} frames, dataset has {manifest.height}x{manifest.width}")
    means = np.array(extra.get("channel_means", manifest.channel_means), dtype=float)
    net = EndoVONet(cfg, params)
    trajs = load_split(manifest, split, depth_source=depth_source)
    if not trajs:
        raise ConfigurationError(f"dataset has no {split!r} trajectories")
    os.makedirs(out, exist_ok=True)
    written = {}
    for t in trajs:
        x, q, per_pair = predict_relatives(net, t.pairs(means, cfg.dtype))
        rel_path = os.path.join(out, f"{t.name}_relative.csv")
        abs_path = os.path.join(out, f"{t.name}_poses.csv")
        write_poses_csv(rel_path, t.timestamps[1:], x, q)
        est = integrate_relative(t.positions[0], t.quats[0], x, q, t.timestamps)
        est.save(abs_path)
        written[t.name] = (rel_path, abs_path)
        if log:
            log("infer", trajectory=t.name, pairs=len(x), ms_per_pair=round(1000 * per_pair, 3))
    return written


def evaluate(est_path, gt_path, out, bins=None, baselines=True, align=None, log=None):
    """Error curves for an estimate (and optional baselines) plus reports."""
    est = Trajectory.load(est_path)
    gt = Trajectory.load(gt_path)
    if align:
        est = align_trajectory(est, gt, with_scale=(align == "sim3"))
    curves = {"estimate": rmse_vs_length(est, gt, bins)}
    trajs = {"ground_truth": gt, "estimate": est}
    if baselines:
        zm, cv = zero_motion_baseline(gt), constant_velocity_baseline(gt)
        curves["zero_motion"] = rmse_vs_length(zm, gt, bins)
        curves["constant_velocity"] = rmse_vs_length(cv, gt, bins)
        trajs["constant_velocity"] = cv
    files = emit_reports(curves, trajs, out)
    if log:
        for name, c in curves.items():
            ok = c.counts > 0
            log("eval", curve=name, bins=int(ok.sum()),
                mean_trans_m=float(np.mean(c.trans_rmse[ok])) if ok.any() else float("nan"),
                mean_rot_deg=float(np.mean(c.rot_rmse[ok])) if ok.any() else float("nan"))
    return curves, files
