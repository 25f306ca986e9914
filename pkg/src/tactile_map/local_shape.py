"""Heightmap estimation from tactile images.

A calibration built from (image, known heightmap) pairs maps quantized colors
to surface gradients, with an affine color -> normal inverse for colors never
seen during calibration. Gradients are then integrated by a sparse Poisson
solve with zero depth on the contact boundary.

Finding that boundary from shading alone is the hard part: flat contact
regions look exactly like the untouched gel. The estimator therefore first
integrates the whole window (free boundary, offset fixed by the lowest
pixels), thresholds that coarse surface to get the contact mask, and only
then runs the Dirichlet solve on the mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import pyamg
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components

from .errors import (
    BadMagicError,
    MapFormatError,
    NumericalFailureError,
    UndefinedMetricError,
    UsageError,
    VersionMismatchError,
)
from .geometry import Heightmap, TactileImage
from .sensor_sim.photometric import heightmap_gradients

CAL_MAGIC = "TCAL"
CAL_VERSION = 1

SOLVER_TOL = 1e-10  # relative residual aimed for
SOLVER_FAIL = 1e-6  # relative residual above which integration is rejected
COARSE_LEVEL = 0.03  # mm, coarse-surface threshold for the contact mask
CONTACT_LEVEL = 0.02  # mm, final mask threshold on the integrated depth


@dataclass(frozen=True, eq=False)
class PhotometricCalibration:
    bins_per_channel: int
    bin_gradients: np.ndarray  # (B**3, 2) mean gradient per bin, NaN when unsupported
    bin_counts: np.ndarray  # (B**3,)
    fallback: np.ndarray  # (3, 4) affine map [r, g, b, 1] -> unit normal
    reference_color: np.ndarray  # flat-gel color
    noise_sigma: float  # per-channel noise seen on the flat gel
    normal_tol: float  # allowed | |n| - 1 | before a color counts as inconsistent
    max_gradient: float
    pixel_pitch: float
    gel_max_indentation: float
    shape: tuple

    def bin_index(self, colors: np.ndarray) -> np.ndarray:
        B = self.bins_per_channel
        q = np.clip(np.floor(colors * B).astype(np.int64), 0, B - 1)
        return (q[0] * B + q[1]) * B + q[2]

    def to_dict(self) -> dict:
        used = np.nonzero(self.bin_counts)[0]
        return {
            "magic": CAL_MAGIC,
            "version": CAL_VERSION,
            "bins_per_channel": self.bins_per_channel,
            "bins": [
                [int(i), float(self.bin_gradients[i, 0]), float(self.bin_gradients[i, 1]), int(self.bin_counts[i])]
                for i in used
            ],
            "fallback": self.fallback.tolist(),
            "reference_color": self.reference_color.tolist(),
            "noise_sigma": self.noise_sigma,
            "normal_tol": self.normal_tol,
            "max_gradient": self.max_gradient,
            "pixel_pitch": self.pixel_pitch,
            "gel_max_indentation": self.gel_max_indentation,
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d) -> "PhotometricCalibration":
        if d.get("magic") != CAL_MAGIC:
            raise BadMagicError("not a tactile calibration file")
        if d.get("version") != CAL_VERSION:
            raise VersionMismatchError(f"calibration version {d.get('version')} != {CAL_VERSION}")
        B = int(d["bins_per_channel"])
        grads = np.full((B**3, 2), np.nan)
        counts = np.zeros(B**3, dtype=np.int64)
        for i, gx, gy, c in d["bins"]:
            grads[i] = (gx, gy)
            counts[i] = c
        return cls(
            B,
            grads,
            counts,
            np.array(d["fallback"]),
            np.array(d["reference_color"]),
            float(d["noise_sigma"]),
            float(d["normal_tol"]),
            float(d["max_gradient"]),
            float(d["pixel_pitch"]),
            float(d["gel_max_indentation"]),
            tuple(d["shape"]),
        )


def save_calibration(cal: PhotometricCalibration, path) -> None:
    Path(path).write_text(json.dumps(cal.to_dict()))


def load_calibration(path) -> PhotometricCalibration:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MapFormatError(f"calibration file is not valid JSON: {e}") from None
    return PhotometricCalibration.from_dict(d)


def _normals_from_gradients(gx, gy):
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    return np.stack([-gx / norm, -gy / norm, 1.0 / norm])


def calibrate(pairs, bins_per_channel: int = 32) -> PhotometricCalibration:
    """Build the color -> gradient lookup from images of known heightmaps."""
    pairs = list(pairs)
    if not pairs:
        raise UsageError("calibration needs at least one (image, heightmap) pair")
    shape = (pairs[0][1].height, pairs[0][1].width)
    pitch = pairs[0][1].pixel_pitch
    gmax = pairs[0][1].gel_max_indentation
    colors, grads, flat = [], [], []
    for img, hm in pairs:
        if (img.height, img.width) != (hm.height, hm.width) or (hm.height, hm.width) != shape:
            raise UsageError("all images and heightmaps must share one grid")
        gx, gy = heightmap_gradients(hm.depths, hm.pixel_pitch)
        c = img.channels.astype(np.float64)
        m = hm.mask
        colors.append(c[:, m])
        grads.append(np.stack([gx[m], gy[m]]))
        # gel that is flat and away from any contact shows the reference color
        still = ~ndimage.binary_dilation(m | (gx != 0) | (gy != 0), iterations=2)
        flat.append(c[:, still])
    colors = np.concatenate(colors, axis=1)
    grads = np.concatenate(grads, axis=1)
    flat = np.concatenate(flat, axis=1)
    if colors.shape[1] == 0:
        raise UsageError("calibration pairs contain no contact pixels")

    if flat.shape[1]:
        reference = flat.mean(axis=1)
        noise = float(flat.std(axis=1).mean())
    else:
        reference = np.median(colors, axis=1)
        noise = 0.0

    B = bins_per_channel
    idx_q = np.clip(np.floor(colors * B).astype(np.int64), 0, B - 1)
    idx = (idx_q[0] * B + idx_q[1]) * B + idx_q[2]
    counts = np.bincount(idx, minlength=B**3)
    sums = np.stack([np.bincount(idx, weights=grads[k], minlength=B**3) for k in range(2)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    means[counts == 0] = np.nan

    # affine inverse of the shading, fitted on unclipped samples
    normals = _normals_from_gradients(grads[0], grads[1])
    ok = np.all((colors > 1e-6) & (colors < 1 - 1e-6), axis=0)
    X = np.vstack([colors[:, ok], np.ones(ok.sum())]).T
    if len(X) < 4:
        raise UsageError("too few unclipped samples to fit the fallback inverse")
    A, *_ = np.linalg.lstsq(X, normals[:, ok].T, rcond=None)
    for _ in range(2):
        # refit without samples whose shading is clipped at zero
        resid = np.linalg.norm(X @ A - normals[:, ok].T, axis=1)
        s = np.median(resid) * 1.4826 + 1e-12
        keep = resid < max(6 * s, 1e-9)
        A, *_ = np.linalg.lstsq(X[keep], normals[:, ok][:, keep].T, rcond=None)
    fallback = A.T
    pred = X @ A
    dev = np.abs(np.linalg.norm(pred, axis=1) - 1.0)
    normal_tol = float(max(0.05, 8.0 * 1.4826 * np.median(dev)))
    max_grad = float(np.hypot(grads[0], grads[1]).max())
    return PhotometricCalibration(
        B, means, counts, fallback, reference, noise, normal_tol, max_grad, pitch, gmax, shape
    )


def fallback_gradients(colors: np.ndarray, cal: PhotometricCalibration):
    """Affine color -> normal inverse; returns (gx, gy, normal_norm)."""
    c = np.asarray(colors, dtype=np.float64)
    flat = c.reshape(3, -1)
    n = cal.fallback[:, :3] @ flat + cal.fallback[:, 3:4]
    nz = np.where(np.abs(n[2]) < 1e-9, 1e-9, n[2])
    gx = (-n[0] / nz).reshape(c.shape[1:])
    gy = (-n[1] / nz).reshape(c.shape[1:])
    return gx, gy, np.linalg.norm(n, axis=0).reshape(c.shape[1:])


def _pixel_gradients(img: TactileImage, cal: PhotometricCalibration):
    """Per-pixel gradient estimate plus a trust flag for every pixel."""
    c = img.channels.astype(np.float64)
    fx, fy, nn = fallback_gradients(c, cal)
    idx = cal.bin_index(c.reshape(3, -1)).reshape(c.shape[1:])
    table = cal.bin_gradients[idx]
    seen = cal.bin_counts[idx] > 0
    gx = np.where(seen, table[..., 0], fx)
    gy = np.where(seen, table[..., 1], fy)
    clipped = np.any((c <= 0.0) | (c >= 1.0), axis=0)
    trusted = (
        (np.abs(nn - 1.0) <= cal.normal_tol)
        & ~clipped
        & (np.hypot(gx, gy) <= 1.5 * cal.max_gradient + 0.1)
        & (np.hypot(fx, fy) <= 1.5 * cal.max_gradient + 0.1)
    )
    return gx, gy, trusted


def image_to_gradients(img: TactileImage, cal: PhotometricCalibration, mask=None):
    """Gradient field ``(gx, gy)`` from lookup or fallback; zero outside ``mask``."""
    if (img.height, img.width) != tuple(cal.shape):
        raise UsageError("image does not match the calibration grid")
    gx, gy, _ = _pixel_gradients(img, cal)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        gx = np.where(m, gx, 0.0)
        gy = np.where(m, gy, 0.0)
    return gx, gy


def _edge_system(gx, gy, unknown, pitch):
    """Least-squares gradient constraints on 4-neighbor edges.

    Edges touching a NaN gradient are dropped. An edge with one end outside
    ``unknown`` puts depth 0 on the cell face halfway along it, so the inside
    end is tied to ``h/2`` times its own gradient with twice the weight of a
    full edge. Returns the normal equations (L, b), the unknown indexing and
    the boundary flag per unknown.
    """
    H, W = unknown.shape
    ids = -np.ones((H, W), dtype=np.int64)
    ids[unknown] = np.arange(unknown.sum())
    n = int(unknown.sum())
    valid = np.isfinite(gx) & np.isfinite(gy)
    rows_i, rows_j, rhs = [], [], []
    for axis, g in ((1, gx), (0, gy)):
        if axis == 1:
            a = (slice(None), slice(0, W - 1))
            b = (slice(None), slice(1, W))
        else:
            a = (slice(0, H - 1), slice(None))
            b = (slice(1, H), slice(None))
        ua, ub = unknown[a], unknown[b]
        ok = valid[a] & valid[b] & (ua | ub)
        # full edge: mean gradient over h; half edge: the inside gradient over h/2
        r = np.where(ua & ub, 0.5 * pitch * (g[a] + g[b]), np.where(ua, 0.5 * pitch * g[a], 0.5 * pitch * g[b]))
        rows_i.append(ids[a][ok])
        rows_j.append(ids[b][ok])
        rhs.append(r[ok])
    ia = np.concatenate(rows_i)
    ib = np.concatenate(rows_j)
    r = np.concatenate(rhs)
    # equation: d[b] - d[a] = r, with -1 ids meaning fixed zero
    both = (ia >= 0) & (ib >= 0)
    w = np.where(both, 1.0, 2.0)
    diag = np.zeros(n)
    bvec = np.zeros(n)
    np.add.at(diag, ia[ia >= 0], w[ia >= 0])
    np.add.at(diag, ib[ib >= 0], w[ib >= 0])
    np.add.at(bvec, ia[ia >= 0], -w[ia >= 0] * r[ia >= 0])
    np.add.at(bvec, ib[ib >= 0], w[ib >= 0] * r[ib >= 0])
    off = sp.coo_matrix((-np.ones(both.sum()), (ia[both], ib[both])), shape=(n, n))
    L = (off + off.T + sp.diags(diag)).tocsr()
    boundary = np.zeros(n, dtype=bool)
    boundary[ia[(ia >= 0) & (ib < 0)]] = True
    boundary[ib[(ib >= 0) & (ia < 0)]] = True
    adj = sp.coo_matrix((np.ones(both.sum()), (ia[both], ib[both])), shape=(n, n)).tocsr()
    return L, bvec, ids, boundary, adj


def _solve_spd(L, b, x0=None):
    if not np.any(b):
        return np.zeros_like(b)
    ml = pyamg.smoothed_aggregation_solver(L, max_coarse=200)
    residuals = []
    x = ml.solve(b, x0=x0, tol=SOLVER_TOL, accel="cg", maxiter=400, residuals=residuals)
    rel = np.linalg.norm(L @ x - b) / np.linalg.norm(b)
    if not rel < SOLVER_FAIL:
        raise NumericalFailureError(f"Poisson solve stalled at relative residual {rel:.2e}")
    return x


def integrate_gradients(gx, gy, mask, pixel_pitch: float, gel_max_indentation: float | None = None) -> Heightmap:
    """Integrate a gradient field over ``mask`` with zero depth on its boundary.

    The discrete Poisson system is the normal equations of the per-edge
    least-squares fit; pixels outside the mask are held at 0 and edges at the
    image border simply have no neighbor (natural boundary). Mask components
    that never touch a zero pixel have no defined offset and are dropped.
    NaN gradients mark pixels whose shading could not be inverted.
    """
    mask = np.asarray(mask, dtype=bool)
    gx = np.asarray(gx, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if not mask.any():
        raise UsageError("integration mask is empty")
    unknown = mask & np.isfinite(gx) & np.isfinite(gy)
    depth = np.zeros(mask.shape)
    if unknown.any():
        L, b, ids, boundary, adj = _edge_system(gx, gy, unknown, pixel_pitch)
        ncomp, labels = connected_components(adj, directed=False)
        anchored = np.zeros(ncomp, dtype=bool)
        anchored[labels[boundary]] = True
        keep = anchored[labels]
        if keep.any():
            if not keep.all():
                sel = np.nonzero(keep)[0]
                L = L[sel][:, sel]
                b = b[sel]
            x = _solve_spd(L, b)
            vals = np.zeros(len(keep))
            vals[keep] = x
            depth[unknown] = vals
    gmax = np.inf if gel_max_indentation is None else gel_max_indentation
    depth = np.clip(depth, 0.0, gmax)
    depth[~unknown] = 0.0
    return Heightmap(depth.astype(np.float32), depth.astype(np.float32) > 0, pixel_pitch, gmax if np.isfinite(gmax) else float(depth.max() + 1))


def _coarse_surface(gx, gy, trusted, deviating, pitch):
    """Free-boundary integration of the whole window; returns depth and anchored component."""
    g_x = np.where(deviating, gx, 0.0)
    g_y = np.where(deviating, gy, 0.0)
    g_x[~trusted] = np.nan
    g_y[~trusted] = np.nan
    unknown = trusted
    L, b, ids, _, adj = _edge_system(g_x, g_y, unknown, pitch)
    ncomp, labels = connected_components(adj, directed=False)
    biggest = np.argmax(np.bincount(labels))
    sel = np.nonzero(labels == biggest)[0]
    Ls = L[sel][:, sel]
    bs = b[sel]
    # pure-Neumann block: a tiny shift makes it definite without moving the solution
    Ls = Ls + sp.identity(len(sel)) * 1e-9
    x = _solve_spd(Ls.tocsr(), bs) if np.any(bs) else np.zeros(len(sel))
    x -= np.percentile(x, 2.0)
    depth = np.zeros(unknown.shape)
    region = np.zeros(unknown.shape, dtype=bool)
    flat_ids = np.nonzero(unknown.ravel())[0][sel]
    depth.ravel()[flat_ids] = x
    region.ravel()[flat_ids] = True
    return depth, region


class LocalShapeEstimator(Protocol):
    def estimate(self, img: TactileImage) -> Heightmap: ...


class PhotometricEstimator:
    """Calibrated lookup + Poisson integration; the default estimator."""

    def __init__(self, cal: PhotometricCalibration):
        self.cal = cal

    def estimate(self, img: TactileImage) -> Heightmap:
        return estimate_local_shape(img, self.cal)


def contact_deviation(img: TactileImage, cal: PhotometricCalibration) -> np.ndarray:
    c = img.channels.astype(np.float64)
    return np.abs(c - cal.reference_color[:, None, None]).max(axis=0)


def estimate_local_shape(img: TactileImage, cal: PhotometricCalibration) -> Heightmap:
    if (img.height, img.width) != tuple(cal.shape):
        raise UsageError("image does not match the calibration grid")
    pitch = cal.pixel_pitch
    gmax = cal.gel_max_indentation
    empty = Heightmap(np.zeros(cal.shape, np.float32), np.zeros(cal.shape, bool), pitch, gmax)

    gx, gy, trusted = _pixel_gradients(img, cal)
    deviating = contact_deviation(img, cal) > max(4.0 * cal.noise_sigma, 0.01)
    # isolated noisy pixels are not contact
    deviating &= ndimage.binary_opening(deviating, structure=np.ones((2, 2)))
    if not deviating.any():
        return empty

    coarse, region = _coarse_surface(gx, gy, trusted, deviating, pitch)
    mask = region & (coarse > COARSE_LEVEL)
    # drop slivers (e.g. the line left by a sharp edge) that carry no area
    mask = ndimage.binary_opening(mask, structure=np.ones((3, 3)))
    if not mask.any():
        return empty
    mask = ndimage.binary_dilation(mask, iterations=2) & region

    g_x = np.where(trusted, gx, np.nan)
    g_y = np.where(trusted, gy, np.nan)
    fine = integrate_gradients(g_x, g_y, mask, pitch, gmax)
    d = fine.depths.astype(np.float64)
    d[d <= CONTACT_LEVEL] = 0.0
    return Heightmap.from_depths(d, pitch, gmax)


def heightmap_rmse(pred: Heightmap, truth: Heightmap) -> float:
    """RMSE (mm) over the union of both contact masks."""
    if pred.depths.shape != truth.depths.shape:
        raise UsageError("heightmaps differ in shape")
    m = pred.mask | truth.mask
    if not m.any():
        raise UndefinedMetricError("both heightmaps are empty")
    diff = pred.depths[m].astype(np.float64) - truth.depths[m].astype(np.float64)
    return float(np.sqrt(np.mean(diff**2)))
