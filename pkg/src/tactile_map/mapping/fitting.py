"""Primitive parameter estimation from merged tactile clouds.

Each kind is an upright solid standing on z = 0 with an unknown horizontal
placement (and yaw for the square kinds). Parameters are found by
Levenberg-Marquardt on signed-distance residuals with analytic Jacobians,
followed by two trimmed refits that discard points beyond 3 robust sigmas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import FitFailureError, UsageError
from ..geometry import PointCloud

MAX_ITERATIONS = 200
TRIM_SIGMAS = 3.0


def _rect_sdf(qx, qz):
    """2D box SDF from the per-axis excesses, with its partials."""
    ox, oz = np.maximum(qx, 0.0), np.maximum(qz, 0.0)
    out = np.hypot(ox, oz)
    inner = np.minimum(np.maximum(qx, qz), 0.0)
    d = out + inner
    safe = np.where(out > 0, out, 1.0)
    dqx = np.where(out > 0, ox / safe, (qx >= qz).astype(float))
    dqz = np.where(out > 0, oz / safe, (qz > qx).astype(float))
    return d, dqx, dqz


def _radial(p, cx, cy):
    dx, dy = p[:, 0] - cx, p[:, 1] - cy
    rho = np.hypot(dx, dy)
    rs = np.where(rho > 1e-12, rho, 1e-12)
    return rho, dx / rs, dy / rs


def _cylinder(theta, p):
    r, cx, cy = theta
    rho, ux, uy = _radial(p, cx, cy)
    J = np.stack([-np.ones(len(p)), -ux, -uy], axis=1)
    return rho - r, J


def _semicone(theta, p):
    r0, a, cx, cy = theta
    rho, ux, uy = _radial(p, cx, cy)
    z = p[:, 2]
    c, s, t = np.cos(a), np.sin(a), np.tan(a)
    e = rho - r0 + z * t
    res = e * c
    J = np.stack([-c * np.ones(len(p)), z / c - e * s, -ux * c, -uy * c], axis=1)
    return res, J


def _local_xy(p, cx, cy, yaw):
    dx, dy = p[:, 0] - cx, p[:, 1] - cy
    c, s = np.cos(yaw), np.sin(yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    # partials of (u, v) wrt (cx, cy, yaw)
    du = np.stack([-c * np.ones(len(p)), -s * np.ones(len(p)), v], axis=1)
    dv = np.stack([s * np.ones(len(p)), -c * np.ones(len(p)), -u], axis=1)
    return u, v, du, dv


def _cuboid(theta, p):
    s1, s2, cx, cy, yaw = theta
    u, v, du, dv = _local_xy(p, cx, cy, yaw)
    qx = np.abs(u) - s1 / 2
    qy = np.abs(v) - s2 / 2
    d, dqx, dqy = _rect_sdf(qx, qy)
    su, sv = np.sign(u), np.sign(v)
    J = np.empty((len(p), 5))
    J[:, 0] = -0.5 * dqx
    J[:, 1] = -0.5 * dqy
    J[:, 2:] = (dqx * su)[:, None] * du + (dqy * sv)[:, None] * dv
    return d, J


def _semipyramid(theta, p):
    b, a, cx, cy, yaw = theta
    u, v, du, dv = _local_xy(p, cx, cy, yaw)
    z = p[:, 2]
    c, s, t = np.cos(a), np.sin(a), np.tan(a)
    # faces +u, +v, -u, -v; the largest plane distance is the active face
    w = np.stack([u, v, -u, -v], axis=1)
    k = np.argmax(w, axis=1)
    wk = w[np.arange(len(p)), k]
    e = wk - b / 2 + z * t
    res = e * c
    dw = np.where((k == 0)[:, None], du, 0.0) + np.where((k == 1)[:, None], dv, 0.0)
    dw -= np.where((k == 2)[:, None], du, 0.0) + np.where((k == 3)[:, None], dv, 0.0)
    J = np.empty((len(p), 5))
    J[:, 0] = -0.5 * c
    J[:, 1] = z / c - e * s
    J[:, 2:] = c * dw
    return res, J


def _double_cylinder(theta, p):
    R, r, jz, cx, cy = theta
    rho, ux, uy = _radial(p, cx, cy)
    z = p[:, 2]
    # big section: rho <= R, 0 <= z <= joint; small section: rho <= r, z >= joint
    d1, a1, b1 = _rect_sdf(rho - R, np.abs(z - jz / 2) - jz / 2)
    d2, a2, b2 = _rect_sdf(rho - r, jz - z)
    use1 = d1 <= d2
    sz = np.sign(z - jz / 2)
    J = np.zeros((len(p), 5))
    J[:, 0] = np.where(use1, -a1, 0.0)
    J[:, 1] = np.where(use1, 0.0, -a2)
    J[:, 2] = np.where(use1, b1 * (-0.5 * sz - 0.5), b2)
    drho = np.where(use1, a1, a2)
    J[:, 3] = -drho * ux
    J[:, 4] = -drho * uy
    return np.where(use1, d1, d2), J


@dataclass(frozen=True)
class _Kind:
    names: tuple  # reported parameters, in theta order
    nuisance: tuple  # placement parameters, in theta order after the reported ones
    angles: tuple  # theta indices held in radians, reported in degrees
    fn: object


KINDS = {
    "cylinder": _Kind(("radius",), ("cx", "cy"), (), _cylinder),
    "semicone": _Kind(("base_radius", "slope"), ("cx", "cy"), (1,), _semicone),
    "cuboid": _Kind(("side1", "side2"), ("cx", "cy", "yaw"), (4,), _cuboid),
    "semipyramid": _Kind(("base_side", "slope"), ("cx", "cy", "yaw"), (1, 4), _semipyramid),
    "double_cylinder": _Kind(("big_radius", "small_radius", "joint"), ("cx", "cy"), (), _double_cylinder),
}
ALIASES = {"double-cylinder": "double_cylinder"}


@dataclass(frozen=True)
class FitResult:
    kind: str
    params: dict  # reported parameters (mm, slopes in degrees)
    placement: dict  # cx, cy and, for square kinds, yaw in degrees
    rms_residual: float  # mm, over inliers of the final fit
    inliers: int
    iterations: int
    cost_history: tuple = field(default=(), repr=False)  # accepted costs of the final run


def _lm(fn, theta, p, max_iter=MAX_ITERATIONS):
    """Levenberg-Marquardt; returns (theta, history, converged)."""
    res, J = fn(theta, p)
    cost = float(res @ res)
    history = [cost]
    lam = 1e-3
    for it in range(max_iter):
        g = J.T @ res
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12)
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                if lam > 1e12:
                    return theta, history, False
                continue
            cand = theta + step
            r2, J2 = fn(cand, p)
            c2 = float(r2 @ r2)
            if np.isfinite(c2) and c2 < cost:
                break
            lam *= 4
            if lam > 1e12:
                # no downhill direction left: at a (local) minimum
                return theta, history, True
        small = cost - c2 <= 1e-14 * max(cost, 1e-300) or np.abs(step).max() < 1e-12
        theta, res, J, cost = cand, r2, J2, c2
        history.append(cost)
        lam = max(lam / 3, 1e-12)
        if small or cost < 1e-24:
            return theta, history, True
    return theta, history, False


def _circle_init(xy):
    """Algebraic (Kasa) circle fit -> (cx, cy, r)."""
    A = np.column_stack([xy[:, 0], xy[:, 1], np.ones(len(xy))])
    b = (xy**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = sol[0] / 2, sol[1] / 2
    r = np.sqrt(max(sol[2] + cx * cx + cy * cy, 1e-6))
    return cx, cy, r


def _initial_guesses(kind, p):
    xy = p[:, :2]
    z = p[:, 2]
    if kind in ("cylinder", "semicone", "double_cylinder"):
        cx, cy, r = _circle_init(xy)
        rho = np.hypot(xy[:, 0] - cx, xy[:, 1] - cy)
        if kind == "cylinder":
            return [np.array([r, cx, cy])]
        if kind == "semicone":
            slope, intercept = np.polyfit(z, rho, 1) if np.ptp(z) > 0 else (0.0, r)
            a = float(np.clip(np.arctan(-slope), np.radians(0.1), np.radians(80)))
            return [np.array([intercept, a, cx, cy])]
        R, rr = np.percentile(rho, 90), np.percentile(rho, 10)
        split = (R + rr) / 2
        lo_z = z[rho > split]
        hi_z = z[rho <= split]
        if len(lo_z) and len(hi_z):
            jz = 0.5 * (lo_z.max() + hi_z.min()) if lo_z.max() < hi_z.min() else np.median(np.concatenate([lo_z, hi_z]))
        else:
            jz = np.median(z)
        return [np.array([R, rr, jz, cx, cy])]
    c = 0.5 * (xy.min(axis=0) + xy.max(axis=0))
    out = []
    for yaw_deg in (0.0, 30.0, 60.0):
        yaw = np.radians(yaw_deg)
        cs, sn = np.cos(yaw), np.sin(yaw)
        u = cs * (xy[:, 0] - c[0]) + sn * (xy[:, 1] - c[1])
        v = -sn * (xy[:, 0] - c[0]) + cs * (xy[:, 1] - c[1])
        su, sv = np.ptp(u), np.ptp(v)
        if kind == "cuboid":
            out.append(np.array([su, sv, c[0], c[1], yaw]))
        else:
            out.append(np.array([max(su, sv), np.radians(5.0), c[0], c[1], yaw]))
    return out


def _canonical(kind, theta):
    """Fold the square kinds' yaw into [-45, 45) deg, swapping sides if needed."""
    theta = theta.copy()
    if kind in ("cuboid", "semipyramid"):
        yaw = theta[4]
        q = int(np.floor((yaw + np.pi / 4) / (np.pi / 2)))
        theta[4] = yaw - q * np.pi / 2
        if kind == "cuboid" and q % 2:
            theta[0], theta[1] = theta[1], theta[0]
    return theta


def fit_primitive_params(cloud: PointCloud, kind: str) -> FitResult:
    """Fit an upright primitive of ``kind`` to ``cloud`` (object frame, base on z = 0)."""
    kind = ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise UsageError(f"unknown primitive kind {kind!r}; expected one of {sorted(KINDS)}")
    spec = KINDS[kind]
    n_params = len(spec.names) + len(spec.nuisance)
    p = np.asarray(cloud.points, dtype=np.float64)
    if len(p) < 10 * n_params:
        raise UsageError(f"need at least {10 * n_params} points to fit a {kind}, got {len(p)}")

    best = None
    for theta0 in _initial_guesses(kind, p):
        theta, hist, ok = _lm(spec.fn, theta0, p)
        if best is None or hist[-1] < best[1][-1]:
            best = (theta, hist, ok)
    theta, hist, ok = best
    total_iter = len(hist) - 1
    sel = p
    for _ in range(2):
        if not ok:
            break
        res, _ = spec.fn(theta, p)
        mad = np.median(np.abs(res - np.median(res)))
        keep = np.abs(res) <= max(TRIM_SIGMAS * 1.4826 * mad, 1e-9)
        if keep.sum() < 10 * n_params or keep.all():
            break
        sel = p[keep]
        theta, hist, ok = _lm(spec.fn, theta, sel)
        total_iter += len(hist) - 1
    theta = _canonical(kind, theta)
    res, _ = spec.fn(theta, sel)
    rms = float(np.sqrt(np.mean(res**2)))
    values = [float(np.degrees(x)) if i in spec.angles else float(x) for i, x in enumerate(theta)]
    k = len(spec.names)
    result = FitResult(
        kind,
        dict(zip(spec.names, values[:k])),
        dict(zip(spec.nuisance, values[k:])),
        rms,
        len(sel),
        total_iter,
        tuple(hist),
    )
    if not ok:
        raise FitFailureError(f"{kind} fit did not converge in {MAX_ITERATIONS} iterations", best=result)
    return result


def relative_errors(fit: FitResult, truth: dict) -> dict:
    """|fitted - true| / |true| for every parameter present in both."""
    return {k: abs(fit.params[k] - v) / abs(v) for k, v in truth.items() if k in fit.params and v != 0}
