"""Global tactile maps: building, persistence and primitive fitting."""

from ..sensor_sim.grasps import gripper_pose_from_sensor, jaw_offset, sensor_pose_from_kinematics
from .core import FORMAT_VERSION, TactileMap, TactileMapEntry, build_map, imprint_seed, make_entry, merge_clouds
from .fitting import KINDS, FitResult, fit_primitive_params, relative_errors
from .persistence import load_map, load_map_with_extra, map_from_bytes, map_to_bytes, save_map

__all__ = [
    "FORMAT_VERSION",
    "KINDS",
    "FitResult",
    "TactileMap",
    "TactileMapEntry",
    "build_map",
    "fit_primitive_params",
    "gripper_pose_from_sensor",
    "imprint_seed",
    "jaw_offset",
    "load_map",
    "load_map_with_extra",
    "make_entry",
    "map_from_bytes",
    "map_to_bytes",
    "merge_clouds",
    "relative_errors",
    "save_map",
    "sensor_pose_from_kinematics",
]
