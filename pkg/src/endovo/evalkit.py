"""Trajectory integration, relative-pose-error curves, baselines and reports."""
import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from endovo.errors import ValidationError
from endovo.geometry import (canonicalize, compose, quat_angle, quat_conj, quat_mul, quat_normalize,
                             quat_rotate, relative)
from endovo.synth.dataset import read_poses_csv, write_poses_csv

CURVE_HEADER = ["bin_m", "trans_rmse_m", "rot_rmse_deg", "count"]


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray   # [F,3]
    quats: np.ndarray       # [F,4], unit, canonical

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(self.quats) != n:
            raise ValidationError("timestamps, positions and quaternions must have equal length")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        if n and np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1) > 1e-6):
            raise ValidationError("trajectory quaternions must be unit norm")

    def __len__(self):
        return len(self.timestamps)

    def path_lengths(self):
        """Cumulative distance travelled, starting at 0."""
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def save(self, path):
        write_poses_csv(path, self.timestamps, self.positions, self.quats)

    @classmethod
    def load(cls, path):
        return cls(*read_poses_csv(path))


def relative_poses(traj: Trajectory):
    """``(x[F-1,3], q[F-1,4])`` with ``Δ_k = T_{k-1}^{-1} T_k``."""
    x, q = relative(traj.positions[:-1], traj.quats[:-1], traj.positions[1:], traj.quats[1:])
    return x, canonicalize(quat_normalize(q))


def integrate_relative(x0, q0, rel_x, rel_q, timestamps=None):
    """Compose ``T_k = T_{k-1} ∘ Δ_k`` starting from ``(x0, q0)``."""
    rel_x = np.asarray(rel_x, dtype=float).reshape(-1, 3)
    rel_q = np.asarray(rel_q, dtype=float).reshape(-1, 4)
    if len(rel_x) != len(rel_q):
        raise ValidationError("relative translations and rotations differ in count")
    norms = np.linalg.norm(rel_q, axis=1)
    if np.any(np.abs(norms - 1) > 1e-6) or not np.all(np.isfinite(rel_x)):
        raise ValidationError("relative quaternions must be unit norm and translations finite")
    q0 = np.asarray(q0, dtype=float)
    if abs(np.linalg.norm(q0) - 1) > 1e-6:
        raise ValidationError("initial quaternion must be unit norm")
    n = len(rel_x) + 1
    pos = np.empty((n, 3))
    quats = np.empty((n, 4))
    pos[0], quats[0] = x0, canonicalize(q0)
    for k in range(1, n):
        p, q = compose(pos[k - 1], quats[k - 1], rel_x[k - 1], rel_q[k - 1])
        pos[k] = p
        quats[k] = canonicalize(q / np.linalg.norm(q))
    ts = np.arange(n, dtype=float) if timestamps is None else timestamps
    return Trajectory(ts, pos, quats)


@dataclass
class ErrorCurve:
    bins: np.ndarray         # metres, left edges
    trans_rmse: np.ndarray   # metres, NaN where count == 0
    rot_rmse: np.ndarray     # degrees, NaN where count == 0
    counts: np.ndarray

    def at(self, length):
        i = int(np.argmin(np.abs(self.bins - length)))
        return float(self.trans_rmse[i]), float(self.rot_rmse[i]), int(self.counts[i])

    def save(self, path):
        rows = [CURVE_HEADER]
        for b, t, r, c in zip(self.bins, self.trans_rmse, self.rot_rmse, self.counts):
            empty = c == 0
            rows.append([repr(float(b)), "" if empty else repr(float(t)), "" if empty else repr(float(r)), str(int(c))])
        try:
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(rows)
        except OSError as exc:
            raise OSError(f"cannot write curve {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise OSError(f"cannot read curve {path}: {exc}") from exc
        if not rows or rows[0] != CURVE_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(CURVE_HEADER)}")
        body = rows[1:]
        val = lambda s: math.nan if s == "" else float(s)  # noqa: E731
        return cls(np.array([float(r[0]) for r in body]), np.array([val(r[1]) for r in body]),
                   np.array([val(r[2]) for r in body]), np.array([int(r[3]) for r in body], dtype=int))


def default_bins(gt: Trajectory, step=0.1):
    """``step``-spaced lengths up to 90% of the ground-truth path length."""
    top = 0.9 * gt.path_lengths()[-1]
    n = int(math.floor(top / step + 1e-9))
    return step * np.arange(1, n + 1)


def span_errors(est: Trajectory, gt: Trajectory, length, tol=1e-9):
    """Translation (m) and rotation (deg) errors of every span of ``length``.

    A span starts at frame ``i`` and ends at the first ``j`` whose
    ground-truth path length from ``i`` reaches ``length``.
    """
    s = gt.path_lengths()
    i = np.arange(len(s))
    j = np.searchsorted(s, s + length - tol, side="left")
    ok = j < len(s)
    i, j = i[ok], j[ok]
    gx, gq = relative(gt.positions[i], gt.quats[i], gt.positions[j], gt.quats[j])
    ex, eq = relative(est.positions[i], est.quats[i], est.positions[j], est.quats[j])
    t_err = np.linalg.norm(ex - gx, axis=-1)
    r_err = np.degrees(quat_angle(quat_mul(quat_conj(gq), eq)))
    return t_err, r_err


def rmse_vs_length(est: Trajectory, gt: Trajectory, bin_edges=None):
    if len(est) != len(gt):
        raise ValidationError(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    if not np.allclose(est.timestamps, gt.timestamps, rtol=0, atol=1e-9):
        raise ValidationError("estimate and ground-truth timestamps are not aligned")
    bins = default_bins(gt) if bin_edges is None else np.sort(np.asarray(bin_edges, dtype=float))
    tr = np.full(len(bins), np.nan)
    rr = np.full(len(bins), np.nan)
    counts = np.zeros(len(bins), dtype=int)
    for k, length in enumerate(bins):
        t_err, r_err = span_errors(est, gt, length)
        counts[k] = len(t_err)
        if len(t_err):
            tr[k] = math.sqrt(float(np.mean(t_err ** 2)))
            rr[k] = math.sqrt(float(np.mean(r_err ** 2)))
    return ErrorCurve(bins, tr, rr, counts)


def rigid_transform(traj: Trajectory, x, q):
    """Apply the world transform ``(x, q)`` to every pose: ``T -> G ∘ T``."""
    pos = quat_rotate(q, traj.positions) + x
    quats = canonicalize(quat_normalize(quat_mul(np.broadcast_to(q, traj.quats.shape), traj.quats)))
    return Trajectory(traj.timestamps.copy(), pos, quats)


def align_trajectory(est: Trajectory, gt: Trajectory, with_scale=False):
    """Least-squares rigid (or similarity) alignment of ``est`` onto ``gt``.

    Diagnostic only: evaluation does not align by default, so scale errors
    stay visible.
    """
    a, b = est.positions, gt.positions
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    cov = (b - mb).T @ (a - ma) / len(a)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1
    rot = u @ s @ vt
    var_a = float(((a - ma) ** 2).sum(axis=1).mean())
    c = float(np.trace(np.diag(d) @ s)) / var_a if with_scale and var_a > 0 else 1.0
    x, y, z, w = Rotation.from_matrix(rot).as_quat()
    q = np.array([w, x, y, z])
    moved = rigid_transform(Trajectory(est.timestamps, c * a, est.quats), np.zeros(3), q)
    return Trajectory(moved.timestamps, moved.positions + (mb - c * rot @ ma), moved.quats)


def zero_motion_baseline(gt: Trajectory):
    if len(gt) < 2:
        raise ValidationError("zero-motion baseline needs at least 2 frames")
    n = len(gt)
    return Trajectory(gt.timestamps.copy(), np.repeat(gt.positions[:1], n, axis=0),
                      np.repeat(gt.quats[:1], n, axis=0))


def constant_velocity_baseline(gt: Trajectory):
    """Each step repeats the previous ground-truth relative motion.

    The first step has no predecessor and is predicted as identity.
    """
    if len(gt) < 3:
        raise ValidationError("constant-velocity baseline needs at least 3 frames")
    x, q = relative_poses(gt)
    rx = np.concatenate([np.zeros((1, 3)), x[:-1]])
    rq = np.concatenate([[[1.0, 0.0, 0.0, 0.0]], q[:-1]])
    return integrate_relative(gt.positions[0], gt.quats[0], rx, rq, gt.timestamps.copy())


# ---------------------------------------------------------------- reports

PALETTE = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _svg_polylines(paths, title, size=420, margin=30):
    pts = np.concatenate([p for p in paths.values()]) if paths else np.zeros((1, 2))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def xy(p):
        # flip y so up is up
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(paths)}" '
             f'viewBox="0 0 {size} {size + 20 * len(paths)}">',
             f'<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{margin}" y="18" font-size="13" font-family="sans-serif">{title}</text>']
    for k, (name, p) in enumerate(paths.items()):
        colour = PALETTE[k % len(PALETTE)]
        coords = " ".join("%.2f,%.2f" % xy(v) for v in p)
        lines.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"><title>{name}</title></polyline>')
        lines.append(f'<text x="{margin}" y="{size + 15 + 20 * k}" font-size="12" font-family="sans-serif" fill="{colour}">{name}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _write_text(path, text):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def summary_table(curves, length=0.5):
    rows = [f"{'curve':<24} {'bins':>5} {'mean_trans_m':>13} {'mean_rot_deg':>13} "
            f"{'trans@%.1fm' % length:>11} {'rot@%.1fm' % length:>10}"]
    for name, c in curves.items():
        ok = c.counts > 0
        mt = float(np.mean(c.trans_rmse[ok])) if ok.any() else math.nan
        mr = float(np.mean(c.rot_rmse[ok])) if ok.any() else math.nan
        t5, r5, _ = c.at(length) if len(c.bins) else (math.nan, math.nan, 0)
        rows.append(f"{name:<24} {int(ok.sum()):>5} {mt:>13.5f} {mr:>13.4f} {t5:>11.5f} {r5:>10.4f}")
    return "\n".join(rows) + "\n"


def emit_reports(curves, trajectories, out_dir):
    """Write ``curve_<name>.csv`` files, top/side/oblique SVG overlays and ``summary.txt``."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    for name, c in curves.items():
        path = os.path.join(out_dir, f"curve_{name}.csv")
        c.save(path)
        written.append(path)
    views = {
        "trajectories_xz.svg": ("top view (x, z)", lambda p: p[:, [0, 2]]),
        "trajectories_yz.svg": ("side view (y, z)", lambda p: p[:, [1, 2]]),
        # oblique projection gives a 3-D impression
        "trajectories_3d.svg": ("oblique 3-D view", lambda p: np.stack(
            [p[:, 2] + 0.5 * p[:, 0], p[:, 1] + 0.35 * p[:, 0]], axis=1)),
    }
    for fname, (title, proj) in views.items():
        path = os.path.join(out_dir, fname)
        _write_text(path, _svg_polylines({k: proj(t.positions) for k, t in trajectories.items()}, title))
        written.append(path)
    path = os.path.join(out_dir, "summary.txt")
    _write_text(path, summary_table(curves))
    written.append(path)
    return written
