"""Nearest-neighbor search, Kabsch alignment and point-to-point ICP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, NoOverlapError, UsageError
from .geometry import PointCloud, RigidTransform, compose


class NNIndex:
    """Exact nearest-neighbor index over a fixed target cloud.

    Immutable after construction; concurrent queries are safe.
    """

    def __init__(self, target: PointCloud | np.ndarray):
        pts = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
        if len(pts) == 0:
            raise UsageError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized lookup: returns (indices, distances)."""
        d, i = self._tree.query(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return i, d


def build_nn_index(target: PointCloud) -> NNIndex:
    return NNIndex(target)


def query_nn(index: NNIndex, point) -> tuple[int, float]:
    i, d = index.query(np.asarray(point, dtype=np.float64).reshape(1, 3))
    return int(i[0]), float(d[0])


def _kabsch_arrays(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    A = src - cs
    B = dst - cd
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    H = A.T @ B
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    # flip the least significant direction to stay in SO(3)
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def kabsch(src: PointCloud, dst: PointCloud) -> RigidTransform:
    """Least-squares rigid transform mapping ``src[i]`` onto ``dst[i]``."""
    if len(src) != len(dst):
        raise UsageError("kabsch needs index-corresponded clouds of equal size")
    if len(src) < 3:
        raise DegenerateGeometryError("kabsch needs at least 3 correspondences")
    R, t = _kabsch_arrays(src.points, dst.points)
    return RigidTransform(R, t)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_tol: float = 1e-4
    max_correspondence_dist: float = 5.0
    min_inliers: int = 20

    def __post_init__(self):
        if self.max_iterations < 1:
            raise UsageError("max_iterations must be >= 1")
        if not (self.convergence_tol > 0 and self.max_correspondence_dist > 0 and self.min_inliers > 0):
            raise UsageError("ICP parameters must be positive")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    final_mean_dist: float
    inlier_count: int
    converged: bool


def icp(
    src: PointCloud,
    dst: PointCloud | NNIndex,
    init: RigidTransform | None = None,
    params: IcpParams | None = None,
) -> IcpResult:
    """Point-to-point ICP returning the full src->dst transform (init included).

    Each iteration gates nearest-neighbor pairs at ``max_correspondence_dist``
    and solves Kabsch on the inliers. A step that would raise the mean gated
    distance is rejected and the previous estimate is returned, so the
    objective is non-increasing over accepted iterations.
    """
    params = params or IcpParams()
    init = init or RigidTransform.identity()
    if len(src) == 0:
        raise UsageError("ICP source cloud is empty")
    index = dst if isinstance(dst, NNIndex) else NNIndex(dst)
    src_pts = src.points
    target = index.points

    def evaluate(T):
        moved = T.apply(src_pts)
        nn, dist = index.query(moved)
        keep = dist <= params.max_correspondence_dist
        return moved, nn, dist, keep

    T = init
    moved, nn, dist, keep = evaluate(T)
    n_in = int(keep.sum())
    if n_in < params.min_inliers:
        fallback = IcpResult(init, 0, float(dist.mean()), n_in, False)
        raise NoOverlapError(f"only {n_in} gated correspondences (< {params.min_inliers})", fallback)
    mean = float(dist[keep].mean())

    converged = False
    iterations = 0
    for _ in range(params.max_iterations):
        iterations += 1
        try:
            R, t = _kabsch_arrays(moved[keep], target[nn[keep]])
        except DegenerateGeometryError:
            break
        T_new = compose(RigidTransform(R, t), T)
        moved_n, nn_n, dist_n, keep_n = evaluate(T_new)
        n_new = int(keep_n.sum())
        if n_new < params.min_inliers:
            break
        mean_new = float(dist_n[keep_n].mean())
        if mean_new > mean + 1e-12:
            # objective went up: keep the previous estimate
            converged = mean_new - mean < params.convergence_tol
            break
        delta = mean - mean_new
        T, moved, nn, dist, keep, mean, n_in = T_new, moved_n, nn_n, dist_n, keep_n, mean_new, n_new
        if delta < params.convergence_tol:
            converged = True
            break
    return IcpResult(T, iterations, mean, n_in, converged)
