"""Lambertian ray-cast renderer for a textured tube seen from inside.

The light sits at the camera centre, so shading follows
``I = albedo * max(0, n.L) / (1 + falloff * d**2)``.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from endovo.errors import ConfigurationError, GeometryError
from endovo.geometry import quat_to_matrix

ALBEDO_MIN, ALBEDO_MAX = 0.4, 1.0


@dataclass
class SceneConfig:
    base_radius: float = 0.3          # metres
    radius_amplitude: float = 0.15    # fraction of base_radius
    radius_wavelength: float = 1.7    # metres along the axis
    bump_amplitude: float = 0.03      # metres, value-noise relief on the wall
    texture_seed: int = 0
    texture_amplitude: float = 1.0    # 0 gives a uniform albedo
    height: int = 64
    width: int = 64
    fov_deg: float = 100.0
    focal: float | None = None        # pixels; derived from fov_deg when None
    cx: float | None = None
    cy: float | None = None
    falloff: float = 2.0              # 1/m^2
    tint: tuple = (1.0, 0.72, 0.62)
    max_range: float = 12.0           # metres; rays that travel further are unlit

    def __post_init__(self):
        if self.base_radius <= 0 or self.height < 1 or self.width < 1:
            raise ConfigurationError("scene radius and image size must be positive")
        if not 0 <= self.radius_amplitude < 0.9:
            raise ConfigurationError("radius_amplitude must be in [0, 0.9)")
        if self.bump_amplitude < 0 or self.bump_amplitude >= 0.5 * self.base_radius * (1 - self.radius_amplitude):
            raise ConfigurationError("bump_amplitude must keep the radius positive")
        if self.focal is None:
            self.focal = 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2)
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0
        if self.focal <= 0:
            raise ConfigurationError("focal length must be positive")
        self.tint = tuple(float(t) for t in self.tint)

    def to_dict(self):
        return asdict(self)

    @property
    def min_radius(self):
        return self.base_radius * (1 - self.radius_amplitude) - self.bump_amplitude


class _ValueNoise:
    """Smooth periodic lattice noise over (theta, z) with values in [0, 1]."""

    def __init__(self, rng, n_theta, z_cell, n_z):
        self.table = rng.random((n_theta, n_z))
        self.n_theta = n_theta
        self.n_z = n_z
        self.z_cell = z_cell

    def __call__(self, theta, z):
        u = (theta / (2 * np.pi)) * self.n_theta
        v = z / self.z_cell
        iu = np.floor(u)
        iv = np.floor(v)
        fu = u - iu
        fv = v - iv
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        i0 = iu.astype(np.int64) % self.n_theta
        i1 = (i0 + 1) % self.n_theta
        j0 = iv.astype(np.int64) % self.n_z
        j1 = (j0 + 1) % self.n_z
        t = self.table
        a = t[i0, j0] * (1 - fu) + t[i1, j0] * fu
        b = t[i0, j1] * (1 - fu) + t[i1, j1] * fu
        return a * (1 - fv) + b * fv


class TubeScene:
    """Geometry and texture of a procedurally generated tube around the z axis."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.texture_seed)
        self._tex = [_ValueNoise(rng, 24, 0.08, 400), _ValueNoise(rng, 64, 0.025, 1200)]
        self._bump = _ValueNoise(rng, 12, 0.15, 200)
        self._phase = rng.uniform(0, 2 * np.pi)

    def radius(self, z, theta):
        c = self.cfg
        r = c.base_radius * (1 + c.radius_amplitude * np.sin(2 * np.pi * z / c.radius_wavelength + self._phase))
        if c.bump_amplitude:
            r = r + c.bump_amplitude * (2 * self._bump(theta, z) - 1)
        return r

    def albedo(self, theta, z):
        c = self.cfg
        n = 0.65 * self._tex[0](theta, z) + 0.35 * self._tex[1](theta, z)
        # contrast-stretch the blended noise into [0, 1]
        n = np.clip((n - 0.5) * 1.8 + 0.5, 0.0, 1.0)
        mid = 0.5 * (ALBEDO_MIN + ALBEDO_MAX)
        a = mid + c.texture_amplitude * (n - 0.5) * (ALBEDO_MAX - ALBEDO_MIN)
        return np.clip(a, ALBEDO_MIN, ALBEDO_MAX)

    def inside(self, p, margin=0.0):
        rho = math.hypot(p[0], p[1])
        return rho < self.radius(np.asarray(p[2]), np.asarray(math.atan2(p[1], p[0]))) - margin


def lambertian_shading(normals, to_light, albedo=1.0, distance=1.0, falloff=0.0):
    """Point-light Lambertian intensity.

    ``normals`` and ``to_light`` are unit vectors on the last axis.
    """
    cos = np.sum(np.asarray(normals) * np.asarray(to_light), axis=-1)
    d = np.asarray(distance, dtype=float)
    return np.asarray(albedo) * np.maximum(cos, 0.0) / (1.0 + falloff * d * d)


def camera_rays(cfg: SceneConfig):
    """Per-pixel ray directions in camera coordinates with unit z component."""
    v, u = np.mgrid[0:cfg.height, 0:cfg.width].astype(float)
    return np.stack([(u - cfg.cx) / cfg.focal, (v - cfg.cy) / cfg.focal, np.ones_like(u)], axis=-1)


def _cylinder_hit(ox, oy, dx, dy, r):
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - r * r
    disc = np.maximum(b * b - 4 * a * c, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b + np.sqrt(disc)) / (2 * a)
    return np.where(a > 1e-14, t, np.inf)


def render_frame(position, quaternion, scene, return_normals=False):
    """Ray-cast one frame.

    Returns ``(image[3,H,W], depth[H,W])`` where depth is the z-distance along
    the optical axis.  Raises :class:`GeometryError` when the camera is not
    strictly inside the tube.
    """
    if not isinstance(scene, TubeScene):
        scene = TubeScene(scene)
    cfg = scene.cfg
    c = np.asarray(position, dtype=float)
    if not scene.inside(c, margin=1e-3):
        raise GeometryError(f"camera at {c} is outside or touching the tube wall")
    rot = quat_to_matrix(quaternion)
    d = camera_rays(cfg) @ rot.T
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]

    # fixed-point refinement of the hit distance against the varying radius
    t = _cylinder_hit(c[0], c[1], dx, dy, cfg.base_radius)
    t = np.minimum(t, cfg.max_range)
    for _ in range(30):
        px, py, pz = c[0] + t * dx, c[1] + t * dy, c[2] + t * dz
        r = scene.radius(pz, np.arctan2(py, px))
        t_new = np.minimum(_cylinder_hit(c[0], c[1], dx, dy, r), cfg.max_range)
        t = 0.5 * t + 0.5 * t_new
    hit = t < cfg.max_range - 1e-9
    px, py, pz = c[0] + t * dx, c[1] + t * dy, c[2] + t * dz
    theta = np.arctan2(py, px)
    rho = np.hypot(px, py)

    h = 1e-4
    dr_dz = (scene.radius(pz + h, theta) - scene.radius(pz - h, theta)) / (2 * h)
    dr_dth = (scene.radius(pz, theta + h) - scene.radius(pz, theta - h)) / (2 * h)
    # gradient of rho - R(z, theta); the inward normal points against it
    gx = px / rho + dr_dth * py / (rho * rho)
    gy = py / rho - dr_dth * px / (rho * rho)
    gz = -dr_dz
    g = np.stack([gx, gy, gz], axis=-1)
    normals = -g / np.linalg.norm(g, axis=-1, keepdims=True)

    to_cam = c - np.stack([px, py, pz], axis=-1)
    dist = np.linalg.norm(to_cam, axis=-1)
    to_light = to_cam / dist[..., None]
    albedo = scene.albedo(theta, pz)
    shade = lambertian_shading(normals, to_light, albedo, dist, cfg.falloff)
    shade = np.where(hit, shade, 0.0)
    image = np.clip(np.asarray(cfg.tint)[:, None, None] * shade[None], 0.0, 1.0)
    if return_normals:
        return image, t, normals
    return image, t


def hemisphere_heightfield(size=64, radius=None):
    """Height field of a hemisphere centred in a ``size x size`` grid.

    Returns ``(height, mask)`` in pixel units; ``mask`` marks the disk.
    """
    radius = radius if radius is not None else 0.375 * size
    y, x = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
    rho2 = x * x + y * y
    height = np.sqrt(np.clip(radius * radius - rho2, 0.0, None))
    return height, rho2 < radius * radius


def render_hemisphere(size=64, radius=None, light=(0.0, 0.0, 1.0), albedo=1.0, background=0.0):
    """Orthographic Lambertian render of a hemisphere against a flat backdrop.

    Uses the analytic sphere normals.  Returns ``(intensity, true_depth,
    disk_mask)``; depth grows away from the viewer.
    """
    radius = radius if radius is not None else 0.375 * size
    height, mask = hemisphere_heightfield(size, radius)
    y, x = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
    n = np.stack([x, y, height], axis=-1) / radius
    light = np.asarray(light, dtype=float)
    light = light / np.linalg.norm(light)
    intensity = np.where(mask, lambertian_shading(n, light, albedo), background)
    return intensity, height.max() - height, mask


def render_heightfield(height, light=(0.0, 0.0, 1.0), albedo=1.0):
    """Orthographic Lambertian render using backward differences.

    Surface normal is ``(-p, -q, 1)`` with ``p = dZ/dx``, ``q = dZ/dy``; this
    is the same discrete model the shape-from-shading solver inverts.
    """
    z = np.asarray(height, dtype=float)
    p = np.zeros_like(z)
    q = np.zeros_like(z)
    p[:, 1:] = z[:, 1:] - z[:, :-1]
    q[1:, :] = z[1:, :] - z[:-1, :]
    light = np.asarray(light, dtype=float)
    light = light / np.linalg.norm(light)
    n = np.stack([-p, -q, np.ones_like(z)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return lambertian_shading(n, light, albedo)
