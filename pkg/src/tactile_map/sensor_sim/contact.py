"""Rigid-object / conforming-gel contact rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Heightmap, RigidTransform, SensorIntrinsics
from .sdf import ObjectModel

LEVEL_STEP = 0.1  # mm between samples when bracketing the first surface entry
BISECTIONS = 32


def penetration_along(model: ObjectModel, origins: np.ndarray, direction: np.ndarray, span: float):
    """Penetration of ``model`` past the gel plane for rays ``origin + z * direction``.

    Looks for the first point where the ray enters the object as z runs from
    ``-span`` up to 0 and returns ``(depth, clamped)`` where depth is ``-z`` of
    that entry (0 if the ray stays outside) and ``clamped`` marks rays already
    inside at ``-span``.
    """
    n = len(origins)
    depth = np.zeros(n)
    clamped = np.zeros(n, dtype=bool)
    if n == 0:
        return depth, clamped
    direction = np.asarray(direction, dtype=np.float64)
    # Lipschitz-1 culling: the segment lies within span/2 of its midpoint
    mid = model.sdf(origins - 0.5 * span * direction)
    cand = np.nonzero(mid <= 0.5 * span + 1e-9)[0]
    if len(cand) == 0:
        return depth, clamped
    levels = np.linspace(-span, 0.0, max(int(np.ceil(span / LEVEL_STEP)), 1) + 1)
    o = origins[cand]
    pts = o[:, None, :] + levels[None, :, None] * direction
    vals = model.sdf(pts.reshape(-1, 3)).reshape(len(cand), len(levels))
    inside = vals <= 0
    hit = inside.any(axis=1)
    first = np.argmax(inside, axis=1)

    at_start = hit & (first == 0)
    depth[cand[at_start]] = span
    clamped[cand[at_start]] = True

    sel = np.nonzero(hit & (first > 0))[0]
    if len(sel):
        lo = levels[first[sel] - 1].copy()  # outside
        hi = levels[first[sel]].copy()  # inside
        os_ = o[sel]
        for _ in range(BISECTIONS):
            m = 0.5 * (lo + hi)
            v = model.sdf(os_ + m[:, None] * direction)
            ins = v <= 0
            hi = np.where(ins, m, hi)
            lo = np.where(ins, lo, m)
        depth[cand[sel]] = -hi
    return depth, clamped


def simulate_contact(model: ObjectModel, sensor_pose: RigidTransform, intr: SensorIntrinsics) -> Heightmap:
    """Indentation heightmap for the sensor placed at ``sensor_pose`` (object frame)."""
    grid = intr.grid_points().reshape(-1, 3)
    origins = sensor_pose.apply(grid)
    direction = sensor_pose.rotation[:, 2]
    depth, _ = penetration_along(model, origins, direction, intr.gel_max_indentation)
    return Heightmap.from_depths(depth.reshape(intr.shape), intr.pixel_pitch, intr.gel_max_indentation)


def trace_first_hit(model: ObjectModel, origins: np.ndarray, direction: np.ndarray, max_dist: float, eps=1e-4):
    """Sphere-trace rays from outside the object; returns hit distance or inf."""
    t = np.zeros(len(origins))
    alive = np.ones(len(origins), dtype=bool)
    hit = np.zeros(len(origins), dtype=bool)
    for _ in range(512):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        d = model.sdf(origins[idx] + t[idx, None] * direction)
        done = d < eps
        hit[idx[done]] = True
        step = np.maximum(d, eps)
        t[idx[~done]] += step[~done]
        alive[idx[done]] = False
        alive[idx[~done]] &= t[idx[~done]] <= max_dist
    out = np.full(len(origins), np.inf)
    out[hit] = t[hit]
    return out


@dataclass(frozen=True)
class ContactPlacement:
    sensor_pose: RigidTransform
    front_point: np.ndarray  # deepest contact point on the object surface (object frame)
    thickness: float


def press_along(
    model: ObjectModel,
    rotation: np.ndarray,
    line_point: np.ndarray,
    intr: SensorIntrinsics,
    press: float,
    standoff: float,
) -> ContactPlacement | None:
    """Close a jaw along ``rotation[:, 2]`` until the object penetrates ``press`` mm.

    The sensor window is centered on the line through ``line_point``; the
    approach starts ``standoff`` mm before it. Returns None when the window
    never touches the object.
    """
    d = rotation[:, 2]
    start = RigidTransform(rotation, line_point - standoff * d)
    grid = intr.grid_points().reshape(intr.height, intr.width, 3)
    coarse = grid[::4, ::4].reshape(-1, 3)
    t = trace_first_hit(model, start.apply(coarse), d, 2 * standoff)
    if not np.isfinite(t).any():
        return None
    span = press + 1.5
    s = float(t.min()) + press + 0.5
    origins = start.apply(grid.reshape(-1, 3))
    for _ in range(4):
        depth, clamped = penetration_along(model, origins + s * d, d, span)
        if clamped.any():
            s -= 1.0
            continue
        D = depth.max()
        if D <= 0:
            # coarse rays hit but the window misses (thin sliver); back off
            return None
        s -= D - press
        k = int(np.argmax(depth))
        front = origins[k] + (s - press) * d
        far = front + 2 * standoff * d
        back = trace_first_hit(model, far[None, :], -d, 2 * standoff)[0]
        thickness = float(2 * standoff - back) if np.isfinite(back) else 0.0
        return ContactPlacement(RigidTransform(rotation, start.translation + s * d), front, thickness)
    return None
