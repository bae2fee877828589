"""Quaternion and rigid-pose helpers.

Quaternions are ``(w, x, y, z)``.  Poses map camera coordinates to world
coordinates: ``p_world = R(q) @ p_cam + x``.  All functions broadcast over
leading axes.
"""
from dataclasses import dataclass

import numpy as np

from endovo.errors import DegenerateRotationError

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q, tol=1e-8):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < tol):
        raise DegenerateRotationError(f"quaternion norm {float(n.min()):.3g} below {tol}")
    return q / n


def canonicalize(q):
    """Pick the representative of ``{q, -q}`` with ``w > 0``.

    When ``w == 0`` the first non-zero of ``(x, y, z)`` is made positive.
    """
    q = np.array(q, dtype=float)
    flat = q.reshape(-1, 4)
    first = np.argmax(flat != 0.0, axis=1)
    sign = np.sign(flat[np.arange(len(flat)), first])
    sign[sign == 0] = 1.0
    return (flat * sign[:, None]).reshape(q.shape)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def quat_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(θ/2)/θ → 1/2 as θ → 0
    k = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 0, theta, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def quat_angle(q):
    """Rotation angle in radians of a unit quaternion, in ``[0, pi]``."""
    q = np.asarray(q, dtype=float)
    v = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(v, np.abs(q[..., 0]))


def quat_distance(a, b):
    """Chordal distance between rotations, insensitive to quaternion sign."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.minimum(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


@dataclass
class RelativePose:
    """Rigid transform: translation ``x`` (metres) and unit quaternion ``q``."""

    x: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), IDENTITY_Q.copy())

    def as_array(self):
        return np.concatenate([self.x, self.q])


def compose(xa, qa, xb, qb):
    """``A ∘ B`` for array poses."""
    return xa + quat_rotate(qa, xb), quat_mul(qa, qb)


def relative(xa, qa, xb, qb):
    """``A⁻¹ ∘ B``: pose of B expressed in A's frame."""
    qa_inv = quat_conj(qa)
    return quat_rotate(qa_inv, np.asarray(xb) - np.asarray(xa)), quat_mul(qa_inv, qb)
