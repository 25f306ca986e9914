"""Tactile maps: one entry per grasp, fused into the object frame by kinematics."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..descriptor import Descriptor, compute_descriptor
from ..errors import EmptyMapError, UsageError
from ..geometry import (
    Heightmap,
    PointCloud,
    RigidTransform,
    SensorIntrinsics,
    TactileImage,
    apply_transform,
    heightmap_to_pointcloud,
)
from ..local_shape import PhotometricCalibration, PhotometricEstimator, heightmap_rmse
from ..sensor_sim.contact import simulate_contact
from ..sensor_sim.grasps import GraspPose
from ..sensor_sim.photometric import PhotometricModel, render_tactile_image
from ..sensor_sim.sdf import ObjectModel

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class TactileMapEntry:
    image: TactileImage
    heightmap: Heightmap
    descriptor: Descriptor
    sensor_pose_world: RigidTransform
    gripper_opening: float
    intrinsics: SensorIntrinsics = field(default_factory=SensorIntrinsics)
    estimation_rmse: float = float("nan")  # vs. the simulated truth, when known

    def __post_init__(self):
        if self.heightmap.is_empty:
            raise UsageError("map entries need a non-empty contact")
        if self.gripper_opening < 0:
            raise UsageError("gripper_opening must be >= 0")

    @cached_property
    def local_cloud(self) -> PointCloud:
        return heightmap_to_pointcloud(self.heightmap, self.intrinsics)

    @cached_property
    def world_cloud(self) -> PointCloud:
        return apply_transform(self.sensor_pose_world, self.local_cloud)


@dataclass(frozen=True, eq=False)
class TactileMap:
    object_id: str
    intrinsics: SensorIntrinsics
    entries: tuple
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        entries = tuple(self.entries)
        for e in entries:
            if (e.heightmap.height, e.heightmap.width) != self.intrinsics.shape:
                raise UsageError("entry heightmap does not match the map intrinsics")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @cached_property
    def descriptors(self) -> np.ndarray:
        """(n, D) matrix of entry descriptors."""
        return np.stack([e.descriptor.values for e in self.entries])

    @cached_property
    def openings(self) -> np.ndarray:
        return np.array([e.gripper_opening for e in self.entries], dtype=np.float64)

    def subset(self, indices) -> "TactileMap":
        return TactileMap(self.object_id, self.intrinsics, [self.entries[i] for i in indices], self.format_version)


def make_entry(
    img: TactileImage,
    hm: Heightmap,
    sensor_pose: RigidTransform,
    opening: float,
    intr: SensorIntrinsics,
    estimation_rmse: float = float("nan"),
) -> TactileMapEntry:
    return TactileMapEntry(img, hm, compute_descriptor(img, hm), sensor_pose, float(opening), intr, estimation_rmse)


def imprint_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Noise stream of imprint ``index`` in a run seeded with ``seed``."""
    return np.random.SeedSequence([int(seed), int(index)])


def build_map(
    model: ObjectModel,
    plan: list[GraspPose],
    cal: PhotometricCalibration,
    intr: SensorIntrinsics | None = None,
    pm: PhotometricModel | None = None,
    seed: int = 0,
    estimator=None,
) -> TactileMap:
    """Grasp ``model`` at every planned pose and keep the usable imprints.

    Each pose is simulated, rendered with its own seeded noise, and passed
    through the shape estimator. Poses whose simulated or estimated contact is
    empty are skipped.
    """
    if not plan:
        raise UsageError("grasp plan is empty")
    intr = intr or SensorIntrinsics()
    pm = pm or PhotometricModel()
    est = estimator or PhotometricEstimator(cal)
    entries = []
    for i, g in enumerate(plan):
        truth = simulate_contact(model, g.sensor_pose, intr)
        if truth.is_empty:
            continue
        img = render_tactile_image(truth, pm, seed=imprint_seed(seed, i))
        hm = est.estimate(img)
        if hm.is_empty:
            continue
        entries.append(make_entry(img, hm, g.sensor_pose, g.gripper_opening, intr, heightmap_rmse(hm, truth)))
    if not entries:
        raise EmptyMapError(f"no grasp of {model.name!r} produced a usable imprint")
    return TactileMap(model.name, intr, entries)


def merge_clouds(tmap: TactileMap) -> PointCloud:
    """All entry clouds in the object frame, in entry order."""
    if not tmap.entries:
        raise EmptyMapError("map has no entries")
    return PointCloud.concatenate([e.world_cloud for e in tmap.entries])
