"""Simulated vision-based tactile sensor: object models, contact, shading, grasp plans."""

from .contact import simulate_contact
from .grasps import (
    GraspPose,
    candidate_grid,
    default_opening,
    grasp_at,
    plan_grasp_grid,
    sensor_pose_from_kinematics,
)
from .photometric import PhotometricModel, heightmap_gradients, render_tactile_image
from .sdf import ObjectModel, Primitive, bundled_model, load_model, parse_model, resolve_model, sdf_eval

__all__ = [
    "GraspPose",
    "ObjectModel",
    "PhotometricModel",
    "Primitive",
    "bundled_model",
    "candidate_grid",
    "default_opening",
    "grasp_at",
    "heightmap_gradients",
    "load_model",
    "parse_model",
    "plan_grasp_grid",
    "render_tactile_image",
    "resolve_model",
    "sdf_eval",
    "sensor_pose_from_kinematics",
    "simulate_contact",
]
