"""Grasp poses and the equispaced palpation grid used to build maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import UsageError
from ..geometry import RigidTransform, SensorIntrinsics, compose, invert
from .contact import press_along
from .sdf import ObjectModel

DEFAULT_PRESS = 1.0  # mm of penetration at the deepest pixel
FACE_NORMALS = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))


def jaw_offset(opening: float) -> RigidTransform:
    """Sensor jaw sits opening/2 before the gripper center along the closing axis (+z)."""
    return RigidTransform.from_translation((0.0, 0.0, -opening / 2.0))


def sensor_pose_from_kinematics(
    gripper_pose_world: RigidTransform, opening: float, hand_sensor_calib: RigidTransform | None = None
) -> RigidTransform:
    if opening < 0:
        raise UsageError("gripper opening must be >= 0")
    calib = hand_sensor_calib or RigidTransform.identity()
    return compose(compose(gripper_pose_world, jaw_offset(opening)), calib)


def gripper_pose_from_sensor(
    sensor_pose_world: RigidTransform, opening: float, hand_sensor_calib: RigidTransform | None = None
) -> RigidTransform:
    """Inverse of :func:`sensor_pose_from_kinematics` for a known opening."""
    calib = hand_sensor_calib or RigidTransform.identity()
    return compose(compose(sensor_pose_world, invert(calib)), invert(jaw_offset(opening)))


@dataclass(frozen=True)
class GraspPose:
    sensor_pose: RigidTransform
    gripper_opening: float
    gripper_pose: RigidTransform | None = None
    face: int = 0
    grid_uv: tuple = (0.0, 0.0)
    yaw_deg: float = 0.0

    def __post_init__(self):
        if self.gripper_opening < 0:
            raise UsageError("gripper_opening must be >= 0")


def default_opening(thickness: float, press: float = DEFAULT_PRESS) -> float:
    """Both jaws sink ``press`` into the part, so they close to thickness - 2 press."""
    return max(thickness - 2.0 * press, 0.0)


def approach_rotation(direction: np.ndarray) -> np.ndarray:
    """Sensor axes for a horizontal approach: x horizontal, y up, z along ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, d)
    x /= np.linalg.norm(x)
    y = np.cross(d, x)
    return np.stack([x, y, d], axis=1)


def _rz(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def grasp_at(
    model: ObjectModel,
    face: int,
    u: float,
    w: float,
    yaw_deg: float,
    intr: SensorIntrinsics,
    opening_fn: Callable[[float], float] = default_opening,
    press: float = DEFAULT_PRESS,
    hand_sensor_calib: RigidTransform | None = None,
) -> GraspPose | None:
    """Close the gripper on grid coordinate (u, w) of a bounding-box side face."""
    lo, hi = model.bounds()
    center = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, 0.0])
    nx, ny = FACE_NORMALS[face % 4]
    d0 = -np.array([nx, ny, 0.0])
    Rz = _rz(yaw_deg)
    rot = approach_rotation(Rz @ d0)
    x0 = approach_rotation(d0)[:, 0]
    line_point = center + Rz @ (u * x0) + np.array([0.0, 0.0, w])
    standoff = float(np.linalg.norm(hi[:2] - lo[:2]) / 2 + np.linalg.norm(rot[:2, 0]) * intr.width * intr.pixel_pitch + 5.0)
    placed = press_along(model, rot, line_point, intr, press, standoff)
    if placed is None:
        return None
    opening = float(opening_fn(placed.thickness))
    calib = hand_sensor_calib or RigidTransform.identity()
    # recover the gripper frame from where the sensor ended up, then re-derive
    # the sensor pose through the kinematic chain
    gripper = gripper_pose_from_sensor(placed.sensor_pose, opening, calib)
    sensor = sensor_pose_from_kinematics(gripper, opening, calib)
    return GraspPose(sensor, opening, gripper, face % 4, (float(u), float(w)), float(yaw_deg))


def grid_coordinates(model: ObjectModel, face: int, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Equispaced (u, w) grid covering a side face of the bounding box."""
    lo, hi = model.bounds()
    half_u = (hi[1] - lo[1]) / 2 if face % 2 == 0 else (hi[0] - lo[0]) / 2
    n_u = int(np.floor(2 * half_u / spacing + 1e-9)) + 1
    n_w = int(np.floor((hi[2] - lo[2]) / spacing + 1e-9)) + 1
    us = (np.arange(n_u) - (n_u - 1) / 2) * spacing
    wmid = (lo[2] + hi[2]) / 2
    ws = wmid + (np.arange(n_w) - (n_w - 1) / 2) * spacing
    return us, ws


def candidate_grid(model: ObjectModel, spacing: float, yaw_angles) -> list[tuple[int, float, float, float]]:
    """Every (face, u, w, yaw) considered before contact filtering."""
    if not spacing > 0:
        raise UsageError("grid spacing must be > 0")
    out = []
    for face in range(4):
        us, ws = grid_coordinates(model, face, spacing)
        for yaw in yaw_angles:
            for w in ws:
                for u in us:
                    out.append((face, float(u), float(w), float(yaw)))
    return out


def plan_grasp_grid(
    model: ObjectModel,
    spacing: float = 10.0,
    yaw_angles=(0.0, 20.0, -20.0),
    opening_fn: Callable[[float], float] = default_opening,
    intr: SensorIntrinsics | None = None,
    press: float = DEFAULT_PRESS,
) -> list[GraspPose]:
    """Palpation plan over the four side faces; poses without contact are dropped."""
    intr = intr or SensorIntrinsics()
    plan = []
    for face, u, w, yaw in candidate_grid(model, spacing, yaw_angles):
        g = grasp_at(model, face, u, w, yaw, intr, opening_fn, press)
        if g is not None:
            plan.append(g)
    return plan


def sample_touches(
    model: ObjectModel,
    n: int,
    seed: int,
    intr: SensorIntrinsics | None = None,
    max_tilt_deg: float = 10.0,
    press_range=(0.4, 1.8),
    reach: float = 0.6,
) -> list[RigidTransform]:
    """Sensor poses pressing down onto ``model`` at random spots.

    Each touch picks a point within ``reach`` of the footprint half-extent, a
    random in-plane rotation, a tilt of at most ``max_tilt_deg`` and a press
    depth from ``press_range``. Used to collect calibration imprints.
    """
    intr = intr or SensorIntrinsics()
    rng = np.random.default_rng(seed)
    lo, hi = model.bounds()
    mid = (lo + hi) / 2
    half = (hi - lo) / 2
    down = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    poses = []
    tries = 0
    while len(poses) < n:
        tries += 1
        if tries > 20 * n + 100:
            raise UsageError("could not place touches on the model")
        xy = mid[:2] + rng.uniform(-reach, reach, size=2) * half[:2]
        yaw = rng.uniform(0.0, 360.0)
        tilt_axis = rng.uniform(0.0, 2 * np.pi)
        tilt = RigidTransform.from_rotvec(
            np.radians(rng.uniform(0.0, max_tilt_deg)) * np.array([np.cos(tilt_axis), np.sin(tilt_axis), 0.0])
        )
        rot = tilt.rotation @ _rz(yaw) @ down
        press = rng.uniform(*press_range)
        line_point = np.array([xy[0], xy[1], hi[2]])
        placed = press_along(model, rot, line_point, intr, press, standoff=10.0)
        if placed is not None:
            poses.append(placed.sensor_pose)
    return poses
