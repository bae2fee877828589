"""Shape from shading in the Tsai-Shah style, plus RGB-D pair stacking.

The solver treats the image as an orthographic view of a Lambertian height
field ``Z`` lit by a distant source.  Slopes come from backward differences,
``p = Z[i, j] - Z[i, j-1]`` and ``q = Z[i, j] - Z[i-1, j]``, and the
reflectance ``R(p, q) = max(0, n.L)`` with ``n ∝ (-p, -q, 1)`` is linearised
in ``Z`` at every sweep.  Each sweep is a Jacobi step: every pixel reads only
the previous iterate, so the result does not depend on traversal order.
"""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from endovo.errors import ConfigurationError, DimensionError, ValidationError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SfSConfig:
    light_direction: tuple = (0.0, 0.0, 1.0)
    albedo: float = 1.0
    iterations: int = 50
    epsilon: float = 1e-2
    relaxation: float = 0.5
    estimate_albedo: bool = True  # take albedo from the brightest pixel
    shadow_threshold: float = 1e-3

    def __post_init__(self):
        light = np.asarray(self.light_direction, dtype=float)
        if light.shape != (3,) or abs(np.linalg.norm(light) - 1.0) > 1e-9:
            raise ConfigurationError(f"light_direction must be a unit 3-vector, got {self.light_direction}")
        if light[2] <= 0:
            raise ConfigurationError("light must come from the viewer's side (z > 0)")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.albedo <= 0 or self.epsilon <= 0 or not 0 < self.relaxation <= 1:
            raise ConfigurationError("albedo, epsilon and relaxation must be positive (relaxation <= 1)")
        self.light_direction = tuple(float(v) for v in light)


@dataclass
class DepthMap:
    """Relative depth, normalised to zero mean / unit std over valid pixels.

    ``height`` keeps the raw recovered surface (larger = closer to the viewer)
    so it can be re-rendered.
    """

    values: np.ndarray
    valid_mask: np.ndarray
    height: np.ndarray

    @property
    def degenerate(self):
        return not bool(self.valid_mask.any())


def _check_unit_range(a, name):
    if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1]")


def rgb_to_intensity(image):
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W] image, got {image.shape}")
    _check_unit_range(image, "image")
    return np.clip(np.tensordot(LUMA, image, axes=1), 0.0, 1.0)


def _slopes(z):
    p = np.zeros_like(z)
    q = np.zeros_like(z)
    p[:, 1:] = z[:, 1:] - z[:, :-1]
    q[1:, :] = z[1:, :] - z[:-1, :]
    return p, q


def reflectance(z, light):
    """Return ``R``, ``dR/dp`` and ``dR/dq`` for height field ``z``."""
    lx, ly, lz = light
    p, q = _slopes(z)
    norm = np.sqrt(1.0 + p * p + q * q)
    num = lz - p * lx - q * ly
    r = num / norm
    lit = r > 0
    dr_dp = np.where(lit, -lx / norm - num * p / norm ** 3, 0.0)
    dr_dq = np.where(lit, -ly / norm - num * q / norm ** 3, 0.0)
    return np.maximum(r, 0.0), dr_dp, dr_dq


def _newton_sweep(z, e, valid, light, eps, relax):
    r, dp, dq = reflectance(z, light)
    # shadowed pixels carry no shape information and contribute no residual
    res = np.where(valid, e - r, 0.0)
    dp = np.where(valid, dp, 0.0)
    dq = np.where(valid, dq, 0.0)
    # Z[i,j] enters its own residual (through p and q) and those of its right
    # and lower neighbours; dres/dZ collects all three terms
    j_self = -(dp + dq)
    j_right = np.zeros_like(z)
    j_right[:, :-1] = dp[:, 1:]
    j_down = np.zeros_like(z)
    j_down[:-1, :] = dq[1:, :]
    res_right = np.zeros_like(z)
    res_right[:, :-1] = res[:, 1:]
    res_down = np.zeros_like(z)
    res_down[:-1, :] = res[1:, :]
    grad = res * j_self + res_right * j_right + res_down * j_down
    curv = j_self * j_self + j_right * j_right + j_down * j_down
    return z - relax * grad / (curv + eps)


def _initial_height(e, valid, light):
    # colocated/frontal light: brighter patches face the light and sit closer,
    # so start from a height proportional to brightness with the best scale
    def cost(log_s):
        r, _, _ = reflectance(np.exp(log_s) * e, light)
        return float(np.mean((e - r)[valid] ** 2))

    hi = np.log(10.0 * max(e.shape))
    best = minimize_scalar(cost, bounds=(np.log(0.1), hi), method="bounded", options={"xatol": 1e-4})
    return np.exp(best.x) * e


def tsai_shah_depth(intensity, cfg=None, initial=None):
    """Recover a relative depth map from a single intensity image.

    ``initial`` overrides the brightness-proportional starting surface.
    """
    cfg = cfg or SfSConfig()
    e = np.asarray(intensity, dtype=float)
    if e.ndim != 2:
        raise DimensionError(f"expected [H,W] intensity, got {e.shape}")
    _check_unit_range(e, "intensity")
    flat = DepthMap(np.zeros_like(e), np.zeros(e.shape, dtype=bool), np.zeros_like(e))
    if e.max() <= 0.0 or np.ptp(e) == 0.0:
        return flat

    albedo = e.max() if cfg.estimate_albedo else cfg.albedo
    e = np.clip(e / albedo, 0.0, 1.0)
    light = np.asarray(cfg.light_direction)
    valid = e > cfg.shadow_threshold
    z = _initial_height(e, valid, light) if initial is None else np.array(initial, dtype=float)
    if z.shape != e.shape:
        raise DimensionError(f"initial surface shape {z.shape} != image shape {e.shape}")
    for _ in range(cfg.iterations):
        z = _newton_sweep(z, e, valid, light, cfg.epsilon, cfg.relaxation)

    depth = -z
    mu = depth[valid].mean() if valid.any() else 0.0
    sd = depth[valid].std() if valid.any() else 0.0
    if not np.isfinite(sd) or sd < 1e-12:
        return DepthMap(np.zeros_like(e), np.zeros(e.shape, dtype=bool), z - z.mean())
    values = np.where(valid, (depth - mu) / sd, 0.0)
    return DepthMap(values, valid, z)


def image_depth(image, cfg=None):
    """Convenience: SfS depth values for an ``[3,H,W]`` image in ``[0, 1]``."""
    return tsai_shah_depth(rgb_to_intensity(image), cfg).values


def stack_rgbd_pair(rgb_a, depth_a, rgb_b, depth_b, channel_means):
    """Stack two RGB-D frames into ``[8,H,W]`` and subtract channel means.

    Channel order is ``R, G, B, D`` of frame a followed by frame b.
    """
    rgb_a, rgb_b = np.asarray(rgb_a), np.asarray(rgb_b)
    depth_a, depth_b = np.asarray(depth_a), np.asarray(depth_b)
    means = np.asarray(channel_means, dtype=float).reshape(-1)
    if means.shape != (8,):
        raise DimensionError(f"channel_means must have 8 entries, got {means.shape}")
    hw = rgb_a.shape[-2:]
    if rgb_a.shape != (3,) + hw or rgb_b.shape != (3,) + hw or depth_a.shape != hw or depth_b.shape != hw:
        raise DimensionError(
            f"frame shapes disagree: {rgb_a.shape}, {depth_a.shape}, {rgb_b.shape}, {depth_b.shape}")
    out = np.concatenate([rgb_a, depth_a[None], rgb_b, depth_b[None]], axis=0).astype(float)
    return out - means[:, None, None]
