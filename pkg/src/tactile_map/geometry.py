"""Heightmaps, tactile images, point clouds and rigid transforms.

Frame convention used throughout the package: image column -> sensor x,
image row -> sensor y, sensor z points out of the gel toward the object.
Heightmaps store indentation (positive, mm pressed into the gel), so a
contact point sits at ``z = -depth`` in the sensor frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, UsageError

ORTHO_TOL = 1e-9


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element acting as ``p -> R p + t`` (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, np.float64)
        t = _frozen(self.translation, np.float64).reshape(3)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise UsageError("rotation must be a finite 3x3 matrix, translation a finite 3-vector")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise UsageError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_euler(cls, angles_deg, translation=(0.0, 0.0, 0.0), seq="xyz") -> "RigidTransform":
        R = Rotation.from_euler(seq, angles_deg, degrees=True).as_matrix()
        return cls(R, translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def rotation_angle(self) -> float:
        """Geodesic angle of the rotation part in radians."""
        R = self.rotation
        # atan2 keeps full precision near 0 and pi, unlike arccos of the trace
        v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return float(np.arctan2(np.linalg.norm(v) / 2.0, (np.trace(R) - 1.0) / 2.0))

    def allclose(self, other: "RigidTransform", atol=1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec(degrees=True)
        return f"RigidTransform(rotvec_deg={np.round(rv, 4).tolist()}, t={np.round(self.translation, 4).tolist()})"


def _reorthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1
        R = u @ vt
    return R


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a o b``: apply ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    # long chains drift by ~1e-16 per product; keep well inside ORTHO_TOL
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
        R = _reorthonormalize(R)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    Rt = a.rotation.T
    return RigidTransform(Rt, -Rt @ a.translation)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = _frozen(self.points, np.float64)
        if p.size == 0:
            p = _frozen(np.zeros((0, 3)), np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise UsageError(f"points must be (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise UsageError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = _frozen(self.normals, np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise UsageError("need exactly one normal per point")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise UsageError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        pts = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.normals is not None for c in clouds):
            return cls(pts, np.concatenate([c.normals for c in clouds], axis=0))
        return cls(pts)


@dataclass(frozen=True, eq=False)
class SensorIntrinsics:
    """Sensor window geometry.

    ``sensor_frame`` places the image grid (pixel (row i, col j) at
    ``(j * pitch, i * pitch, 0)``) inside the sensor frame. The default puts
    the sensor origin at the window center.
    """

    width: int = 160
    height: int = 120
    pixel_pitch: float = 0.15
    gel_max_indentation: float = 2.0
    sensor_frame: RigidTransform | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("sensor resolution must be positive")
        if not self.pixel_pitch > 0 or not self.gel_max_indentation > 0:
            raise ConfigurationError("pixel_pitch and gel_max_indentation must be > 0")
        if self.sensor_frame is None:
            c = -0.5 * self.pixel_pitch * np.array([self.width - 1, self.height - 1, 0.0])
            object.__setattr__(self, "sensor_frame", RigidTransform.from_translation(c))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def grid_points(self, z=0.0) -> np.ndarray:
        """Sensor-frame coordinates of every pixel center, shape (H, W, 3)."""
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        g = np.stack([jj * self.pixel_pitch, ii * self.pixel_pitch, np.broadcast_to(z, jj.shape)], axis=-1)
        return self.sensor_frame.apply(g.reshape(-1, 3).astype(np.float64)).reshape(self.height, self.width, 3)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "pixel_pitch": self.pixel_pitch,
            "gel_max_indentation": self.gel_max_indentation,
            "sensor_frame": self.sensor_frame.as_matrix().tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "SensorIntrinsics":
        return cls(
            int(d["width"]),
            int(d["height"]),
            float(d["pixel_pitch"]),
            float(d["gel_max_indentation"]),
            RigidTransform.from_matrix(d["sensor_frame"]),
        )


@dataclass(frozen=True, eq=False)
class Heightmap:
    """Indentation field over the sensor window, stored as float32."""

    depths: np.ndarray
    mask: np.ndarray
    pixel_pitch: float
    gel_max_indentation: float

    def __post_init__(self):
        d = _frozen(self.depths, np.float32)
        m = _frozen(self.mask, bool)
        if d.ndim != 2 or m.shape != d.shape:
            raise UsageError("depths and mask must be matching 2-D grids")
        if not np.all(np.isfinite(d)):
            raise UsageError("depths must be finite")
        if np.any(d < 0) or np.any(d > np.float32(self.gel_max_indentation)):
            raise UsageError("depths must lie in [0, gel_max_indentation]")
        if np.any(m != (d > 0)):
            raise UsageError("mask must cover exactly the nonzero depths")
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_depths(cls, depths, pixel_pitch, gel_max_indentation) -> "Heightmap":
        """Clamp raw depths into range and derive the mask from depth > 0."""
        d = np.clip(np.asarray(depths, dtype=np.float64), 0.0, gel_max_indentation).astype(np.float32)
        return cls(d, d > 0, pixel_pitch, gel_max_indentation)

    @classmethod
    def empty(cls, intr: SensorIntrinsics) -> "Heightmap":
        z = np.zeros(intr.shape, dtype=np.float32)
        return cls(z, z > 0, intr.pixel_pitch, intr.gel_max_indentation)

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def is_empty(self) -> bool:
        return not self.mask.any()


@dataclass(frozen=True, eq=False)
class TactileImage:
    """Three-channel image with values in [0, 1], stored as float32 (3, H, W)."""

    channels: np.ndarray

    def __post_init__(self):
        c = _frozen(self.channels, np.float32)
        if c.ndim != 3 or c.shape[0] != 3:
            raise UsageError("channels must have shape (3, H, W)")
        if not np.all(np.isfinite(c)) or c.min(initial=0) < 0 or c.max(initial=0) > 1:
            raise UsageError("channel values must lie in [0, 1]")
        object.__setattr__(self, "channels", c)

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


def heightmap_to_pointcloud(hm: Heightmap, intr: SensorIntrinsics) -> PointCloud:
    """One sensor-frame point per masked pixel at ``z = -depth``."""
    if (hm.height, hm.width) != intr.shape or hm.pixel_pitch != intr.pixel_pitch:
        raise ConfigurationError(
            f"heightmap {hm.height}x{hm.width}@{hm.pixel_pitch} does not match "
            f"sensor {intr.height}x{intr.width}@{intr.pixel_pitch}"
        )
    ii, jj = np.nonzero(hm.mask)
    grid = np.stack(
        [jj * intr.pixel_pitch, ii * intr.pixel_pitch, -hm.depths[ii, jj].astype(np.float64)], axis=1
    )
    return PointCloud(intr.sensor_frame.apply(grid))


def apply_transform(T: RigidTransform, c: PointCloud) -> PointCloud:
    normals = None if c.normals is None else T.apply_vectors(c.normals)
    return PointCloud(T.apply(c.points), normals)


def corresponded_rmse(a: PointCloud, b: PointCloud) -> float:
    """RMSE between index-corresponded clouds (mm)."""
    if len(a) != len(b):
        raise UsageError(f"clouds differ in size ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise UsageError("corresponded_rmse needs at least one point")
    d = a.points - b.points
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", d, d))))


def nn_rmse(a: PointCloud, reference: PointCloud) -> float:
    """RMSE of nearest-neighbor distances from ``a`` to ``reference``.

    Only meant for surface-vs-surface comparison; localization errors use
    :func:`corresponded_rmse`.
    """
    if len(a) == 0 or len(reference) == 0:
        raise UsageError("nn_rmse needs non-empty clouds")
    d, _ = cKDTree(reference.points).query(a.points)
    return float(np.sqrt(np.mean(d**2)))


def voxel_downsample(c: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output order follows the first occurrence of each voxel so the result is
    deterministic for a given input order.
    """
    if not voxel > 0:
        raise UsageError("voxel size must be > 0")
    if len(c) == 0:
        return c
    keys = np.floor(c.points / voxel).astype(np.int64)
    _, first, inverse, counts = np.unique(keys, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, c.points)
    centroids = sums / counts[:, None]
    order = np.argsort(first, kind="stable")
    pts = centroids[order]
    # centroid of a convex set of points stays inside their bounding box up to rounding
    pts = np.clip(pts, c.points.min(axis=0), c.points.max(axis=0))
    return PointCloud(pts)


def save_xyz(c: PointCloud, path) -> None:
    """Write ``x y z [nx ny nz]`` lines with 6 decimals (mm)."""
    data = c.points if c.normals is None else np.hstack([c.points, c.normals])
    np.savetxt(Path(path), data, fmt="%.6f")


def load_xyz(path) -> PointCloud:
    data = np.loadtxt(Path(path), ndmin=2)
    if data.size == 0:
        return PointCloud.empty()
    if data.shape[1] == 6:
        n = data[:, 3:]
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return PointCloud(data[:, :3], n)
    if data.shape[1] != 3:
        raise UsageError(f"expected 3 or 6 columns, found {data.shape[1]}")
    return PointCloud(data)
