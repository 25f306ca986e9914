"""Localizing a new imprint against a tactile map, and the evaluation protocols.

Three estimators are provided: RANDOM (pose of a random entry), CTI (pose of
the most similar entry among those with a compatible gripper opening) and
CTI-ICP-N (CTI refined by ICP against the union of the N most similar entry
clouds). Poses are sensor-in-object-frame transforms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .descriptor import DEFAULT_OPENING_TOL, Descriptor, compute_descriptor, distance_matrix, rank_indices, rank_with_fallback
from .errors import NoMatchError, NoOverlapError, UsageError
from .geometry import (
    Heightmap,
    PointCloud,
    RigidTransform,
    SensorIntrinsics,
    TactileImage,
    heightmap_to_pointcloud,
)
from .local_shape import PhotometricEstimator
from .mapping.core import TactileMap, TactileMapEntry, imprint_seed
from .registration import IcpParams, IcpResult, icp
from .sensor_sim.contact import simulate_contact
from .sensor_sim.grasps import DEFAULT_PRESS, grasp_at, grid_coordinates
from .sensor_sim.photometric import PhotometricModel, render_tactile_image

METHODS = ("RANDOM", "CTI", "CTI-ICP")


@dataclass(frozen=True, eq=False)
class LocalizationQuery:
    image: TactileImage
    heightmap: Heightmap
    descriptor: Descriptor
    gripper_opening: float
    local_cloud: PointCloud

    def __post_init__(self):
        if len(self.local_cloud) == 0:
            raise UsageError("query has no contact points")

    @classmethod
    def from_imprint(cls, img: TactileImage, hm: Heightmap, opening: float, intr: SensorIntrinsics) -> "LocalizationQuery":
        return cls(img, hm, compute_descriptor(img, hm), float(opening), heightmap_to_pointcloud(hm, intr))

    @classmethod
    def from_entry(cls, e: TactileMapEntry) -> "LocalizationQuery":
        return cls(e.image, e.heightmap, e.descriptor, e.gripper_opening, e.local_cloud)


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    method: str
    sensor_pose_world: RigidTransform
    matched_entry: int
    n: int | None = None
    icp_diag: IcpResult | None = None
    rmse_vs_truth: float | None = None

    @property
    def label(self) -> str:
        return f"CTI-ICP-{self.n}" if self.method == "CTI-ICP" else self.method

    def with_truth(self, query: LocalizationQuery, true_pose: RigidTransform) -> "LocalizationResult":
        err = pose_error(query.local_cloud, true_pose, self.sensor_pose_world)
        return LocalizationResult(self.method, self.sensor_pose_world, self.matched_entry, self.n, self.icp_diag, err)


def parse_method(text: str) -> tuple[str, int | None]:
    """'RANDOM' | 'CTI' | 'CTI-ICP-<N>' -> (method, N)."""
    t = text.strip().upper().replace("_", "-")
    if t in ("RANDOM", "CTI"):
        return t, None
    m = re.fullmatch(r"CTI-ICP-(\d+)", t)
    if m and int(m.group(1)) >= 1:
        return "CTI-ICP", int(m.group(1))
    raise UsageError(f"unknown method {text!r}; expected RANDOM, CTI or CTI-ICP-<N>")


def method_label(method: str, n: int | None) -> str:
    return f"CTI-ICP-{n}" if method == "CTI-ICP" else method


def pose_error(local_cloud: PointCloud, true_pose: RigidTransform, est_pose: RigidTransform) -> float:
    """Corresponded RMSE (mm) of a sensor-frame cloud placed at the two poses."""
    p = local_cloud.points
    return float(np.sqrt(np.mean(np.sum((true_pose.apply(p) - est_pose.apply(p)) ** 2, axis=1))))


def _check_map(tmap: TactileMap):
    if len(tmap) == 0:
        raise UsageError("map has no entries")


def localize_random(tmap: TactileMap, seed, candidates=None) -> LocalizationResult:
    _check_map(tmap)
    idx = np.arange(len(tmap)) if candidates is None else np.asarray(candidates)
    if len(idx) == 0:
        raise UsageError("no candidate entries")
    k = int(idx[np.random.default_rng(seed).integers(len(idx))])
    return LocalizationResult("RANDOM", tmap.entries[k].sensor_pose_world, k)


def _ranking(q: LocalizationQuery, tmap: TactileMap, opening_tol, candidates, distances):
    if distances is None:
        distances = distance_matrix(q.descriptor.values, tmap.descriptors)[0]
    r = rank_with_fallback(distances, tmap.openings, q.gripper_opening, opening_tol, candidates)
    if len(r) == 0:
        raise NoMatchError("no map entry to match against")
    return r


def localize_cti(
    q: LocalizationQuery, tmap: TactileMap, opening_tol: float = DEFAULT_OPENING_TOL, candidates=None, distances=None
) -> LocalizationResult:
    """Pose of the closest tactile imprint with a compatible opening."""
    _check_map(tmap)
    k = int(_ranking(q, tmap, opening_tol, candidates, distances)[0])
    return LocalizationResult("CTI", tmap.entries[k].sensor_pose_world, k)


def auxiliary_cloud(tmap: TactileMap, indices) -> PointCloud:
    """World-frame union of the given entries' clouds, in entry order."""
    return PointCloud.concatenate([tmap.entries[i].world_cloud for i in sorted(int(i) for i in indices)])


def localize_cti_icp(
    q: LocalizationQuery,
    tmap: TactileMap,
    n: int = 5,
    opening_tol: float = DEFAULT_OPENING_TOL,
    params: IcpParams | None = None,
    candidates=None,
    distances=None,
) -> LocalizationResult:
    """CTI followed by ICP of the query cloud against the top-``n`` entries.

    ICP starts from the top entry's pose. When it cannot find enough overlap
    the CTI pose is returned with a non-converged diagnostic.
    """
    _check_map(tmap)
    if n < 1:
        raise UsageError("n must be >= 1")
    ranked = _ranking(q, tmap, opening_tol, candidates, distances)
    top = int(ranked[0])
    init = tmap.entries[top].sensor_pose_world
    aux = auxiliary_cloud(tmap, ranked[:n])
    try:
        res = icp(q.local_cloud, aux, init=init, params=params)
    except NoOverlapError as e:
        return LocalizationResult("CTI-ICP", init, top, n, e.result)
    return LocalizationResult("CTI-ICP", res.transform, top, n, res)


def localize(q, tmap, method: str, n=None, seed=0, opening_tol=DEFAULT_OPENING_TOL, candidates=None, distances=None):
    if method == "RANDOM":
        return localize_random(tmap, seed, candidates)
    if method == "CTI":
        return localize_cti(q, tmap, opening_tol, candidates, distances)
    if method == "CTI-ICP":
        return localize_cti_icp(q, tmap, n or 5, opening_tol, candidates=candidates, distances=distances)
    raise UsageError(f"unknown method {method!r}")


@dataclass(frozen=True)
class Identification:
    object_id: str
    map_index: int
    result: LocalizationResult
    best_distances: tuple  # per map; inf when the opening filter left nothing
    ambiguous: bool


def identify(
    q: LocalizationQuery, maps: list[TactileMap], n: int = 5, opening_tol: float = DEFAULT_OPENING_TOL
) -> Identification:
    """Pick the object whose best opening-compatible entry is most similar, then localize in it.

    When no map has an entry within ``opening_tol`` the tolerance is doubled
    once for every map, then the opening filter is dropped, mirroring
    :func:`rank_with_fallback`. Exact ties go to the earlier map and are
    flagged as ambiguous.
    """
    if not maps:
        raise UsageError("identify needs at least one map")
    dists = [distance_matrix(q.descriptor.values, m.descriptors)[0] if len(m) else None for m in maps]
    for tol in (opening_tol, 2 * opening_tol, np.inf):
        best = []
        for m, d in zip(maps, dists):
            r = rank_indices(d, m.openings, q.gripper_opening, tol) if d is not None else []
            best.append(float(d[r[0]]) if len(r) else np.inf)
        best = np.array(best)
        if np.isfinite(best).any():
            break
    else:
        raise NoMatchError("every map is empty")
    k = int(np.argmin(best))
    ambiguous = int(np.sum(best == best[k])) > 1
    res = localize_cti_icp(q, maps[k], n, opening_tol)
    return Identification(maps[k].object_id, k, res, tuple(float(b) for b in best), ambiguous)


@dataclass(frozen=True)
class EvalResult:
    method: str
    n: int | None
    entry_indices: np.ndarray
    errors: np.ndarray = field(repr=False)

    @property
    def label(self) -> str:
        return method_label(self.method, self.n)

    @property
    def median(self) -> float:
        return float(np.median(self.errors)) if len(self.errors) else float("nan")


def _evaluate(tmap: TactileMap, queries, pool, method, n, seed, opening_tol, dmat):
    errs = []
    for i in queries:
        e = tmap.entries[i]
        cand = pool[pool != i]
        q = LocalizationQuery.from_entry(e)
        res = localize(q, tmap, method, n, imprint_seed(seed, i), opening_tol, cand, dmat[i])
        errs.append(pose_error(e.local_cloud, e.sensor_pose_world, res.sensor_pose_world))
    return np.array(errs, dtype=np.float64)


def leave_one_out_eval(
    tmap: TactileMap, method: str = "CTI", n: int | None = None, seed: int = 0, opening_tol: float = DEFAULT_OPENING_TOL
) -> EvalResult:
    """Localize every entry against the map without it; errors are corresponded RMSE (mm).

    Descriptors are per-entry, so they are reused rather than recomputed for
    each reduced map.
    """
    if len(tmap) < 2:
        raise UsageError("leave-one-out needs at least two entries")
    if method not in METHODS:
        method, n = parse_method(method)
    dmat = distance_matrix(tmap.descriptors, tmap.descriptors)
    idx = np.arange(len(tmap))
    return EvalResult(method, n, idx, _evaluate(tmap, idx, idx, method, n, seed, opening_tol, dmat))


@dataclass(frozen=True)
class FractionPoint:
    fraction: float
    map_size: int
    result: EvalResult

    @property
    def median(self) -> float:
        return self.result.median


def map_fraction_study(
    tmap: TactileMap,
    fractions,
    method: str = "CTI",
    seed: int = 0,
    n: int | None = None,
    opening_tol: float = DEFAULT_OPENING_TOL,
    max_queries: int | None = None,
    repeats: int = 10,
) -> list[FractionPoint]:
    """Median error when only a seeded random fraction of the entries forms the map.

    For each fraction below one, ``repeats`` sub-maps are drawn and the entries
    left out of each are localized against it; errors are pooled over the
    repetitions before taking the median, since a single small sub-map is a
    noisy sample. Fraction 1.0 is plain leave-one-out. ``max_queries`` caps
    the evaluated entries per sub-map (seeded subsample) to bound runtime.
    """
    fractions = [float(f) for f in fractions]
    if any(not 0 < f <= 1 for f in fractions):
        raise UsageError("fractions must lie in (0, 1]")
    if len(tmap) < 2:
        raise UsageError("the map needs at least two entries")
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    if method not in METHODS:
        method, n = parse_method(method)
    N = len(tmap)
    dmat = distance_matrix(tmap.descriptors, tmap.descriptors)
    out = []
    for f in fractions:
        queries_all, errs_all = [], []
        for r in range(1 if f >= 1.0 else repeats):
            rng = np.random.default_rng([seed, int(round(f * 1e6)), r])
            if f >= 1.0:
                pool = np.arange(N)
                queries = pool
            else:
                k = min(max(int(round(f * N)), 1), N - 1)
                pool = np.sort(rng.choice(N, size=k, replace=False))
                queries = np.setdiff1d(np.arange(N), pool)
            if max_queries is not None and len(queries) > max_queries:
                queries = np.sort(rng.choice(queries, size=max_queries, replace=False))
            queries_all.append(queries)
            errs_all.append(_evaluate(tmap, queries, pool, method, n, seed, opening_tol, dmat))
        size = N if f >= 1.0 else min(max(int(round(f * N)), 1), N - 1)
        out.append(FractionPoint(f, size, EvalResult(method, n, np.concatenate(queries_all), np.concatenate(errs_all))))
    return out


def error_histogram(errors, bin_width: float = 5.0, value_range: float = 80.0) -> np.ndarray:
    """Counts per ``bin_width`` bin over [0, value_range], plus a final overflow bin."""
    if not bin_width > 0:
        raise UsageError("bin_width must be > 0")
    if not value_range > 0:
        raise UsageError("value_range must be > 0")
    nb = int(np.ceil(value_range / bin_width - 1e-9))
    counts = np.zeros(nb + 1, dtype=np.int64)
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return counts
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise UsageError("errors must be finite and >= 0")
    over = e > value_range
    k = np.minimum(np.floor(e[~over] / bin_width).astype(np.int64), nb - 1)
    counts[:nb] = np.bincount(k, minlength=nb)
    counts[nb] = over.sum()
    return counts


def simulate_query(
    model,
    face: int,
    u: float,
    w: float,
    yaw_deg: float,
    cal,
    intr: SensorIntrinsics | None = None,
    pm: PhotometricModel | None = None,
    noise_seed=0,
    press: float = DEFAULT_PRESS,
):
    """Grasp ``model`` once and turn the imprint into a query.

    Returns ``(query, true_sensor_pose)`` or None when the grasp misses or the
    estimated contact is empty.
    """
    intr = intr or SensorIntrinsics()
    pm = pm or PhotometricModel()
    g = grasp_at(model, face, u, w, yaw_deg, intr, press=press)
    if g is None:
        return None
    truth = simulate_contact(model, g.sensor_pose, intr)
    if truth.is_empty:
        return None
    img = render_tactile_image(truth, pm, seed=noise_seed)
    hm = PhotometricEstimator(cal).estimate(img)
    if hm.is_empty:
        return None
    return LocalizationQuery.from_imprint(img, hm, g.gripper_opening, intr), g.sensor_pose


def random_queries(model, count: int, seed: int, cal, intr=None, pm=None, max_yaw: float = 20.0, spacing: float = 10.0):
    """``count`` queries from grasps at random spots of the palpation grid's span.

    Face, grid coordinates (continuous, within the grid extent) and yaw in
    [-max_yaw, max_yaw] are drawn from a generator seeded with ``seed``.
    """
    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 50:
            raise UsageError(f"could not generate {count} queries on {model.name!r}")
        face = int(rng.integers(4))
        us, ws = grid_coordinates(model, face, spacing)
        u = rng.uniform(us.min(), us.max()) if len(us) > 1 else float(us[0])
        w = rng.uniform(ws.min(), ws.max()) if len(ws) > 1 else float(ws[0])
        yaw = rng.uniform(-max_yaw, max_yaw)
        got = simulate_query(model, face, u, w, yaw, cal, intr, pm, noise_seed=imprint_seed(seed, 10**6 + attempts))
        if got is not None:
            out.append(got)
    return out
