"""Fixed-length imprint descriptors and opening-filtered similarity ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .geometry import Heightmap, TactileImage
from .sensor_sim.photometric import heightmap_gradients

GRID = 16
ORIENTATION_BINS = 8
N_STATS = 4
DESCRIPTOR_LENGTH = GRID * GRID + ORIENTATION_BINS + N_STATS

# relative weight of each block before the final normalization
DEPTH_WEIGHT = 1.0
HIST_WEIGHT = 0.5
STATS_WEIGHT = 0.5

DEFAULT_OPENING_TOL = 2.0


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        n = np.linalg.norm(v)
        if n != 0 and abs(n - 1.0) > 1e-9:
            raise UsageError("descriptor must be unit length or all zero")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_raw(cls, raw) -> "Descriptor":
        """Normalize an arbitrary nonnegative-scale feature vector."""
        v = np.asarray(raw, dtype=np.float64).ravel()
        n = np.linalg.norm(v)
        return cls(v / n if n > 0 else np.zeros_like(v))


def _pool(a: np.ndarray, n: int) -> np.ndarray:
    """Area-average ``a`` into an n x n grid (blocks differ by at most a pixel)."""
    rows = np.array_split(np.arange(a.shape[0]), n)
    cols = np.array_split(np.arange(a.shape[1]), n)
    out = np.empty((n, n))
    for i, r in enumerate(rows):
        band = a[r[0] : r[-1] + 1]
        for j, c in enumerate(cols):
            out[i, j] = band[:, c[0] : c[-1] + 1].mean()
    return out


def raw_features(hm: Heightmap) -> np.ndarray:
    """Unnormalized, block-weighted descriptor features of a heightmap."""
    if hm.is_empty:
        return np.zeros(DESCRIPTOR_LENGTH)
    d = np.where(hm.mask, hm.depths.astype(np.float64), 0.0)
    gmax = hm.gel_max_indentation
    pooled = _pool(d / gmax, GRID).ravel()

    gx, gy = heightmap_gradients(d, hm.pixel_pitch)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bins = np.floor((ang + np.pi) / (2 * np.pi) * ORIENTATION_BINS).astype(int) % ORIENTATION_BINS
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=ORIENTATION_BINS)
    total = hist.sum()
    hist = hist / total if total > 0 else hist

    H, W = d.shape
    ii, jj = np.nonzero(hm.mask)
    stats = np.array([hm.mask.mean(), d.max() / gmax, jj.mean() / W, ii.mean() / H])
    return np.concatenate([DEPTH_WEIGHT * pooled, HIST_WEIGHT * hist, STATS_WEIGHT * stats])


def compute_descriptor(img: TactileImage | None, hm: Heightmap) -> Descriptor:
    """Descriptor of one imprint; the zero vector when there is no contact.

    The features come from the estimated heightmap so that imprints of the
    same geometry agree regardless of photometric noise; ``img`` only fixes
    the expected grid.
    """
    if img is not None and (img.height, img.width) != (hm.height, hm.width):
        raise UsageError("image and heightmap dimensions differ")
    return Descriptor.from_raw(raw_features(hm))


def cosine_distance(a: Descriptor, b: Descriptor) -> float:
    if len(a) != len(b):
        raise UsageError(f"descriptor lengths differ ({len(a)} vs {len(b)})")
    if a.is_zero or b.is_zero:
        return 1.0
    return float(np.clip(1.0 - a.values @ b.values, 0.0, 2.0))


def distance_matrix(query: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """Cosine distances between rows of ``query`` (or one vector) and ``stack``."""
    q = np.atleast_2d(query)
    d = np.clip(1.0 - q @ stack.T, 0.0, 2.0)
    zq = ~np.any(q, axis=1)
    zs = ~np.any(stack, axis=1)
    d[zq, :] = 1.0
    d[:, zs] = 1.0
    return d


def rank_indices(distances: np.ndarray, openings: np.ndarray, query_opening: float, opening_tol: float, candidates=None) -> np.ndarray:
    """Indices passing the opening filter, ascending by distance then index."""
    if not opening_tol > 0:
        raise UsageError("opening_tol must be > 0")
    idx = np.arange(len(distances)) if candidates is None else np.asarray(candidates)
    keep = idx[np.abs(openings[idx] - query_opening) < opening_tol]
    order = np.lexsort((keep, distances[keep]))
    return keep[order]


def rank_with_fallback(distances, openings, query_opening, opening_tol=DEFAULT_OPENING_TOL, candidates=None) -> np.ndarray:
    """Ranking that widens the opening filter when nothing passes it.

    The tolerance is doubled once; if the ranking is still empty the filter
    is dropped altogether.
    """
    r = rank_indices(distances, openings, query_opening, opening_tol, candidates)
    if len(r) == 0:
        r = rank_indices(distances, openings, query_opening, 2 * opening_tol, candidates)
    if len(r) == 0:
        r = rank_indices(distances, openings, query_opening, np.inf, candidates)
    return r


def _map_arrays(tmap):
    descs = np.stack([e.descriptor.values for e in tmap.entries])
    openings = np.array([e.gripper_opening for e in tmap.entries], dtype=np.float64)
    return descs, openings


def rank_by_similarity(query: Descriptor, query_opening: float, tmap, opening_tol: float = DEFAULT_OPENING_TOL) -> np.ndarray:
    """Map entry indices with |opening - query_opening| < tol, most similar first.

    An empty result means nothing passed the filter; see
    :func:`rank_with_fallback` for the widening policy.
    """
    if not opening_tol > 0:
        raise UsageError("opening_tol must be > 0")
    if not tmap.entries:
        return np.zeros(0, dtype=np.int64)
    descs, openings = _map_arrays(tmap)
    if descs.shape[1] != len(query):
        raise UsageError("query descriptor length does not match the map")
    d = distance_matrix(query.values, descs)[0]
    return rank_indices(d, openings, query_opening, opening_tol)
