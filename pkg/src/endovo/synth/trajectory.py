"""Ground-truth camera trajectories inside the tube.

The camera looks down the tube's +z axis (identity orientation) and moves
in three motion classes:

``incremental``
    slow, smooth spline motion with small orientation changes;
``scan-with-loops``
    axial back-and-forth sweeps with circular lateral scanning, so the
    camera keeps revisiting earlier positions;
``sharp``
    fast motion whose per-frame translation and rotation jitter is drawn
    independently for every frame.

Per-frame relative translation and rotation are clipped to the limits in
:class:`TrajectorySpec`, so ``length`` is a target that clipping may
slightly undershoot.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from endovo.errors import ConfigurationError
from endovo.geometry import (canonicalize, quat_angle, quat_conj, quat_from_rotvec, quat_mul,
                             quat_normalize, relative)

CLASSES = ("incremental", "scan-with-loops", "sharp")


@dataclass
class TrajectorySpec:
    traj_class: str = "incremental"
    length: float = 4.0              # metres of camera path
    frames: int = 200
    max_speed: float = 0.08          # metres per frame
    max_angular_speed: float = 0.15  # radians per frame
    seed: int = 0

    def __post_init__(self):
        if self.traj_class not in CLASSES:
            raise ConfigurationError(f"trajectory class must be one of {CLASSES}, got {self.traj_class!r}")
        if self.frames < 2:
            raise ConfigurationError("a trajectory needs at least 2 frames")
        if self.length < 0 or self.max_speed < 0 or self.max_angular_speed < 0:
            raise ConfigurationError("length and speed limits must be non-negative")
        if self.length / (self.frames - 1) > self.max_speed * (1 + 1e-12):
            raise ConfigurationError(
                f"{self.length} m in {self.frames - 1} steps needs more than max_speed={self.max_speed} m/frame")

    def to_dict(self):
        return asdict(self)


def _smooth(rng, n, spacing, dims):
    """Cubic-spline noise in [-1, 1] with knots every ``spacing`` frames."""
    knots = max(2, int(math.ceil(n / spacing)) + 1)
    xs = np.linspace(0, n - 1, knots) if n > 1 else np.array([0.0, 1.0])
    ys = rng.uniform(-1, 1, size=(knots, dims))
    return np.clip(CubicSpline(xs, ys, axis=0)(np.arange(n)), -1, 1)


def _class_targets(spec, rng, radius):
    """Axial step weights, lateral offsets and orientation rotation vectors."""
    n = spec.frames
    k = np.arange(n)
    if spec.traj_class == "incremental":
        axial = 1.0 + 0.2 * _smooth(rng, n - 1, 30, 1)[:, 0]
        lateral = 0.3 * radius * _smooth(rng, n, 40, 2)
        rot = 0.15 * _smooth(rng, n, 50, 3)
    elif spec.traj_class == "scan-with-loops":
        period = 50.0
        phase = rng.uniform(0, 2 * np.pi, size=3)
        axial = 1.0 + 2.2 * np.sin(2 * np.pi * k[1:] / period + phase[0])
        ang = 2 * np.pi * k / (0.8 * period) + phase[1]
        lateral = 0.35 * radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        rot = np.stack([0.25 * np.sin(ang), 0.25 * np.cos(ang),
                        0.2 * _smooth(rng, n, 50, 1)[:, 0]], axis=1)
    else:
        # smooth wandering plus independent per-frame jitter, mostly pitch and yaw
        axial = 1.0 + 0.6 * rng.uniform(-1, 1, size=n - 1)
        lateral = 0.3 * radius * _smooth(rng, n, 30, 2) + 0.08 * radius * rng.uniform(-1, 1, size=(n, 2))
        rot = 0.3 * _smooth(rng, n, 25, 3) + 0.25 * rng.uniform(-1, 1, size=(n, 3)) * [1.0, 1.0, 0.3]
    return axial, lateral, rot


def _fit_axial(axial, lateral, length):
    """Scale axial steps so the target path has the requested length."""
    dlat = np.diff(lateral, axis=0)
    lat_len = float(np.linalg.norm(dlat, axis=1).sum())
    if lat_len > 0.5 * length:
        shrink = 0.5 * length / lat_len if lat_len > 0 else 0.0
        lateral = lateral * shrink
        dlat = dlat * shrink

    def path_len(c):
        return float(np.sqrt((dlat ** 2).sum(axis=1) + (c * axial) ** 2).sum())

    if length == 0 or not np.any(axial):
        return np.zeros_like(axial), lateral
    hi = 1.0
    while path_len(hi) < length:
        hi *= 2.0
    c = brentq(lambda c: path_len(c) - length, 0.0, hi, xtol=1e-14)
    return c * axial, lateral


def generate_trajectory(spec: TrajectorySpec, radius=0.2):
    """Absolute camera-to-world poses ``(positions[F,3], quaternions[F,4])``.

    ``radius`` is the clear tube radius the lateral motion must respect.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.frames
    axial, lateral, rot = _class_targets(spec, rng, radius)
    lateral = lateral - lateral[0]
    steps, lateral = _fit_axial(axial, lateral, spec.length)
    target = np.zeros((n, 3))
    target[:, :2] = lateral
    target[1:, 2] = np.cumsum(steps)
    q_target = quat_from_rotvec(rot - rot[0])

    pos = np.zeros((n, 3))
    quats = np.zeros((n, 4))
    quats[0] = [1.0, 0.0, 0.0, 0.0]
    for i in range(1, n):
        d = target[i] - pos[i - 1]
        dn = np.linalg.norm(d)
        if dn > spec.max_speed:
            d *= spec.max_speed / dn
        pos[i] = pos[i - 1] + d
        # rotate toward the target orientation, at most max_angular_speed
        rel = quat_mul(quat_conj(quats[i - 1]), q_target[i])
        ang = float(quat_angle(rel))
        if ang > spec.max_angular_speed:
            rel = canonicalize(rel)
            axis = rel[1:] / np.linalg.norm(rel[1:])
            rel = quat_from_rotvec(axis * spec.max_angular_speed)
        quats[i] = quat_normalize(quat_mul(quats[i - 1], rel))
    return pos, canonicalize(quats)


def relative_motions(positions, quats):
    """Per-frame relative poses ``T_{k-1}^{-1} T_k`` as ``(x[F-1,3], q[F-1,4])``."""
    x, q = relative(positions[:-1], quats[:-1], positions[1:], quats[1:])
    return x, canonicalize(quat_normalize(q))


def count_loop_closures(positions, radius):
    """Count returns to earlier positions.

    Frame ``j`` re-enters frame ``i``'s ball of radius ``2 * radius`` after
    having left it; consecutive re-entry frames form one event.
    """
    p = np.asarray(positions, dtype=float)
    n = len(p)
    r2 = 2.0 * radius
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    inside = dist < r2
    reentry = np.zeros(n, dtype=bool)
    for j in range(2, n):
        # i < j - 1 with j inside ball(i) and j - 1 outside it
        reentry[j] = bool(np.any(inside[j, : j - 1] & ~inside[j - 1, : j - 1]))
    starts = reentry & ~np.concatenate([[False], reentry[:-1]])
    return int(starts.sum())
