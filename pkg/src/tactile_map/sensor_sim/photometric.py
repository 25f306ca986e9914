"""Lambertian three-light forward model standing in for the sensor optics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..geometry import Heightmap, TactileImage


def _default_lights():
    elev = np.radians(50.0)
    az = np.radians([90.0, 210.0, 330.0])
    return np.stack([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.full(3, np.sin(elev))], axis=1)


@dataclass(frozen=True, eq=False)
class PhotometricModel:
    light_dirs: np.ndarray = field(default_factory=_default_lights)  # one unit row per channel
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.75, 0.85]))
    ambient: float = 0.1
    noise_sigma: float = 0.01

    def __post_init__(self):
        L = np.array(self.light_dirs, dtype=np.float64)
        a = np.array(self.albedo, dtype=np.float64).reshape(3)
        if L.shape != (3, 3) or np.abs(np.linalg.norm(L, axis=1) - 1).max() > 1e-9:
            raise ConfigurationError("light_dirs must be three unit row vectors")
        if np.linalg.cond(L) >= 100:
            raise ConfigurationError("light directions are too close to degenerate")
        if np.any(a <= 0) or np.any(a > 1):
            raise ConfigurationError("albedo must lie in (0, 1]")
        if not 0 <= self.ambient < 1 or self.noise_sigma < 0:
            raise ConfigurationError("ambient must be in [0, 1) and noise_sigma >= 0")
        L.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "light_dirs", L)
        object.__setattr__(self, "albedo", a)

    def with_noise(self, sigma: float) -> "PhotometricModel":
        return PhotometricModel(self.light_dirs, self.albedo, self.ambient, sigma)

    def shade(self, gx, gy) -> np.ndarray:
        """Noiseless channel intensities for gradient fields, shape (3, ...)."""
        gx = np.asarray(gx, dtype=np.float64)
        gy = np.asarray(gy, dtype=np.float64)
        norm = np.sqrt(gx * gx + gy * gy + 1.0)
        n = np.stack([-gx / norm, -gy / norm, 1.0 / norm])
        lam = np.maximum(np.tensordot(self.light_dirs, n, axes=1), 0.0)
        return self.ambient + self.albedo.reshape((3,) + (1,) * gx.ndim) * lam

    def flat_color(self) -> np.ndarray:
        return self.shade(np.zeros(1), np.zeros(1))[:, 0]


def heightmap_gradients(depths, pixel_pitch) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference (one-sided at the border) gradients ``(d/dx, d/dy)``."""
    d = np.asarray(depths, dtype=np.float64)
    gy, gx = np.gradient(d, pixel_pitch)
    return gx, gy


def render_tactile_image(hm: Heightmap, pm: PhotometricModel, seed=None) -> TactileImage:
    """Shade the gel surface; normals are ``(-dd/dx, -dd/dy, 1)`` normalized."""
    gx, gy = heightmap_gradients(hm.depths, hm.pixel_pitch)
    img = pm.shade(gx, gy)
    if pm.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, pm.noise_sigma, size=img.shape)
    return TactileImage(np.clip(img, 0.0, 1.0))
