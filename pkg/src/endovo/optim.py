"""Pose loss, loss aggregation and the Adam update."""
from dataclasses import dataclass, field

import numpy as np

from endovo.errors import ConfigurationError, DimensionError, NumericError
from endovo.geometry import RelativePose

ADAM_VARIANTS = ("combined", "combined-eps-inside", "standard")


@dataclass
class PoseLossConfig:
    beta: float = 1.0
    loss_weights: dict = field(default_factory=lambda: {"pose": 1.0})

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ConfigurationError("loss weights must be non-negative")


def _safe_unit(d, n):
    # subgradient 0 where the error vanishes
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n[..., None] > 0, d / np.where(n > 0, n, 1.0)[..., None], 0.0)


def align_quaternion(q_pred, q_gt):
    """Return ``+q_gt`` or ``-q_gt``, whichever is closer to ``q_pred``."""
    q_gt = np.asarray(q_gt, dtype=float)
    dp = np.linalg.norm(q_pred - q_gt, axis=-1)
    dm = np.linalg.norm(q_pred + q_gt, axis=-1)
    return np.where((dm < dp)[..., None], -q_gt, q_gt)


def pose_loss_terms(pred, gt_x, gt_q, beta):
    """Vectorised loss over leading axes.

    Returns ``(loss, trans_err, rot_err, grad)`` with ``loss = trans_err +
    beta * rot_err`` per element and ``grad`` shaped like ``pred``.
    """
    pred = np.asarray(pred)
    if pred.shape[-1] != 7:
        raise DimensionError(f"pose prediction must have 7 values, got {pred.shape}")
    if not np.all(np.isfinite(pred)):
        raise NumericError("non-finite pose prediction")
    dx = pred[..., :3] - gt_x
    dq = pred[..., 3:] - align_quaternion(pred[..., 3:], gt_q)
    nt = np.linalg.norm(dx, axis=-1)
    nr = np.linalg.norm(dq, axis=-1)
    grad = np.concatenate([_safe_unit(dx, nt), beta * _safe_unit(dq, nr)], axis=-1)
    return nt + beta * nr, nt, nr, grad.astype(pred.dtype, copy=False)


def pose_loss(pred_raw, gt: RelativePose, cfg: PoseLossConfig):
    """``|x_hat - x| + beta * |q_hat - q|`` and its gradient w.r.t. ``pred_raw``.

    ``q_hat`` is the raw (unnormalised) regressor output; the ground-truth
    quaternion is sign-aligned to it first.
    """
    pred = np.asarray(pred_raw, dtype=float).reshape(-1)
    loss, _, _, grad = pose_loss_terms(pred, gt.x, gt.q, cfg.beta)
    return float(loss), grad


def aggregate_loss(per_head, cfg: PoseLossConfig):
    """Weighted sum of named head losses, summed in sorted name order."""
    total = 0.0
    for name in sorted(per_head):
        if name not in cfg.loss_weights:
            raise ConfigurationError(f"no loss weight for head {name!r}")
        total += cfg.loss_weights[name] * float(per_head[name])
    return total


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    variant: str = "combined"

    @classmethod
    def create(cls, params, alpha=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, variant="combined"):
        if variant not in ADAM_VARIANTS:
            raise ConfigurationError(f"unknown Adam variant {variant!r}; use one of {ADAM_VARIANTS}")
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m, v, 0, alpha, beta1, beta2, epsilon, variant)


def adam_step(params, grads, state: AdamState):
    """One Adam update, in place on ``params`` and ``state``.

    ``combined`` (default) folds both bias corrections into one step factor,
    ``W -= alpha * sqrt(1 - b2^t) / (1 - b1^t) * m / (sqrt(v) + eps)``.
    ``combined-eps-inside`` uses ``sqrt(v + eps)`` in the denominator and
    ``standard`` is the usual bias-corrected form with
    ``m_hat / (sqrt(v_hat) + eps)``.
    Returns ``(params, state)``.
    """
    if set(grads) != set(params) or set(state.m) != set(params):
        raise DimensionError("params, grads and optimizer state must share names")
    for k in params:
        if grads[k].shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise DimensionError(f"shape mismatch for {k}: {params[k].shape} vs {grads[k].shape}")
    state.t += 1
    t = state.t
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in params:
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.variant == "combined":
            step = (state.alpha * np.sqrt(c2) / c1) * m / (np.sqrt(v) + eps)
        elif state.variant == "combined-eps-inside":
            step = (state.alpha * np.sqrt(c2) / c1) * m / np.sqrt(v + eps)
        else:
            step = state.alpha * (m / c1) / (np.sqrt(v / c2) + eps)
        params[k] -= step.astype(params[k].dtype, copy=False)
    return params, state
