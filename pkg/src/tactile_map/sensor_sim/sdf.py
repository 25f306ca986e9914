"""Signed-distance object models built from a few parametric primitives.

Every primitive except the sphere stands on its own z = 0 plane and is
centered on its own z axis; ``at``/``rot`` in a model file place that frame in
the object frame. Distances are in mm, negative inside.

Model file grammar (one statement per line, ``#`` starts a comment)::

    name <identifier>
    fit <kind> <key>=<value> ...          # optional ground-truth parameters
    <shape> <key>=<value> ... [at=x,y,z] [rot=rx,ry,rz] [op=union|subtract]

Shapes and their keys::

    sphere           radius
    cylinder         radius height
    cone             base_radius slope height      # slope: side vs axis, deg
    box              sx sy sz
    pyramid_frustum  base_side slope height        # slope: face vs axis, deg

``rot`` is an extrinsic x-y-z Euler triple in degrees. The first primitive
must be a union; later ones fold left to right (union = min,
subtract = max(a, -b)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ModelGrammarError, UsageError
from ..geometry import RigidTransform

SHAPE_KEYS = {
    "sphere": ("radius",),
    "cylinder": ("radius", "height"),
    "cone": ("base_radius", "slope", "height"),
    "box": ("sx", "sy", "sz"),
    "pyramid_frustum": ("base_side", "slope", "height"),
}
OPS = ("union", "subtract")


def _segment_dist_2d(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    ee = ex * ex + ey * ey
    if ee == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * ex + (py - ay) * ey) / ee, 0.0, 1.0)
    return np.hypot(px - ax - t * ex, py - ay - t * ey)


def _revolved_sdf(p, profile):
    """Exact SDF of a solid of revolution about z.

    ``profile`` lists (radius, z) vertices of a convex polygon whose closing
    edge lies on the axis; that edge is not a surface, so it is excluded from
    the unsigned distance.
    """
    rho = np.hypot(p[:, 0], p[:, 1])
    z = p[:, 2]
    dist = np.full(len(p), np.inf)
    inside = np.ones(len(p), dtype=bool)
    # vertices go from the axis at the bottom, out and up, back to the axis
    for (ar, az), (br, bz) in zip(profile[:-1], profile[1:]):
        dist = np.minimum(dist, _segment_dist_2d(rho, z, ar, az, br, bz))
        # outward normal of a CCW-in-(r, z) edge walked as listed is (dz, -dr)
        nr, nz = bz - az, -(br - ar)
        if nr == 0 and nz == 0:
            continue
        inside &= (rho - ar) * nr + (z - az) * nz < 0
    return np.where(inside, -dist, dist)


def _convex_polyhedron_sdf(p, faces):
    """Exact SDF of a convex polyhedron given outward-CCW polygon faces."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    dist = np.full(len(p), np.inf)
    inside = np.ones(len(p), dtype=bool)
    for verts in faces:
        v0 = verts[0]
        n = np.cross(verts[1] - v0, verts[2] - v0)
        n = n / np.linalg.norm(n)
        sd = (x - v0[0]) * n[0] + (y - v0[1]) * n[1] + (z - v0[2]) * n[2]
        inside &= sd < 0
        in_poly = np.ones(len(p), dtype=bool)
        edge_d2 = np.full(len(p), np.inf)
        for a, b in zip(verts, np.roll(verts, -1, axis=0)):
            e = b - a
            m = np.cross(e, n)  # in-plane, points out of the polygon
            rx, ry, rz = x - a[0], y - a[1], z - a[2]
            in_poly &= rx * m[0] + ry * m[1] + rz * m[2] <= 0
            t = np.clip((rx * e[0] + ry * e[1] + rz * e[2]) / (e @ e), 0.0, 1.0)
            edge_d2 = np.minimum(edge_d2, (rx - t * e[0]) ** 2 + (ry - t * e[1]) ** 2 + (rz - t * e[2]) ** 2)
        dist = np.minimum(dist, np.where(in_poly, np.abs(sd), np.sqrt(edge_d2)))
    return np.where(inside, -dist, dist)


def _frustum_faces(a, b, h):
    bot = np.array([[-a, -a, 0], [a, -a, 0], [a, a, 0], [-a, a, 0]], dtype=float)
    top = np.array([[-b, -b, h], [b, -b, h], [b, b, h], [-b, b, h]], dtype=float)
    faces = [bot[::-1], top]
    for k in range(4):
        k1 = (k + 1) % 4
        faces.append(np.array([bot[k], bot[k1], top[k1], top[k]]))
    return faces


@dataclass(frozen=True, eq=False)
class Primitive:
    shape: str
    params: dict
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    op: str = "union"

    def __post_init__(self):
        if self.shape not in SHAPE_KEYS:
            raise UsageError(f"unknown shape {self.shape!r}")
        if self.op not in OPS:
            raise UsageError(f"unknown combine op {self.op!r}")
        keys = SHAPE_KEYS[self.shape]
        missing = [k for k in keys if k not in self.params]
        extra = [k for k in self.params if k not in keys]
        if missing or extra:
            raise UsageError(f"{self.shape}: missing {missing}, unexpected {extra}")
        params = {k: float(self.params[k]) for k in keys}
        if any(not v > 0 for v in params.values()):
            raise UsageError(f"{self.shape}: all dimensions must be positive")
        if self.shape in ("cone", "pyramid_frustum"):
            if params["slope"] >= 90:
                raise UsageError("slope must be below 90 degrees")
            half = params["base_radius"] if self.shape == "cone" else params["base_side"] / 2
            if params["height"] * np.tan(np.radians(params["slope"])) > half + 1e-9:
                raise UsageError(f"{self.shape}: height exceeds the apex")
        object.__setattr__(self, "params", params)

    def local_sdf(self, q: np.ndarray) -> np.ndarray:
        P = self.params
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=1) - P["radius"]
        if self.shape == "cylinder":
            h = P["height"]
            dr = np.hypot(q[:, 0], q[:, 1]) - P["radius"]
            dz = np.abs(q[:, 2] - h / 2) - h / 2
            return np.minimum(np.maximum(dr, dz), 0.0) + np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        if self.shape == "box":
            half = np.array([P["sx"], P["sy"], P["sz"]]) / 2
            d = np.abs(q - np.array([0.0, 0.0, half[2]])) - half
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            return outside + np.minimum(d.max(axis=1), 0.0)
        if self.shape == "cone":
            r1, h = P["base_radius"], P["height"]
            r2 = r1 - h * np.tan(np.radians(P["slope"]))
            return _revolved_sdf(q, [(0.0, 0.0), (r1, 0.0), (max(r2, 0.0), h), (0.0, h)])
        a = P["base_side"] / 2
        h = P["height"]
        b = max(a - h * np.tan(np.radians(P["slope"])), 0.0)
        # fold into the wedge x >= |y|; the +x face, top and bottom then
        # carry every nearest feature and decide inside/outside
        ax, ay = np.abs(q[:, 0]), np.abs(q[:, 1])
        folded = np.stack([np.maximum(ax, ay), np.minimum(ax, ay), q[:, 2]], axis=1)
        faces = _frustum_faces(a, b, h)
        return _convex_polyhedron_sdf(folded, [faces[0], faces[1], faces[3]])

    def local_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        P = self.params
        if self.shape == "sphere":
            r = P["radius"]
            return np.full(3, -r), np.full(3, r)
        if self.shape == "cylinder":
            r = P["radius"]
            return np.array([-r, -r, 0.0]), np.array([r, r, P["height"]])
        if self.shape == "cone":
            r = P["base_radius"]
            return np.array([-r, -r, 0.0]), np.array([r, r, P["height"]])
        if self.shape == "box":
            return np.array([-P["sx"] / 2, -P["sy"] / 2, 0.0]), np.array([P["sx"] / 2, P["sy"] / 2, P["sz"]])
        a = P["base_side"] / 2
        return np.array([-a, -a, 0.0]), np.array([a, a, P["height"]])

    def sdf(self, points: np.ndarray) -> np.ndarray:
        R, t = self.pose.rotation, self.pose.translation
        return self.local_sdf((points - t) @ R)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.local_bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        w = self.pose.apply(corners)
        return w.min(axis=0), w.max(axis=0)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    name: str
    primitives: tuple
    truth: dict = field(default_factory=dict)  # kind -> {param: value}, informational only

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise UsageError("an object model needs at least one primitive")
        if prims[0].op != "union":
            raise UsageError("the first primitive must be a union")
        object.__setattr__(self, "primitives", prims)

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        p = p.reshape(-1, 3)
        d = self.primitives[0].sdf(p)
        for prim in self.primitives[1:]:
            di = prim.sdf(p)
            d = np.minimum(d, di) if prim.op == "union" else np.maximum(d, -di)
        return float(d[0]) if single else d

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        boxes = [p.bounds() for p in self.primitives if p.op == "union"]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def transformed(self, T: RigidTransform) -> "ObjectModel":
        """The same object with every primitive moved by ``T``."""
        prims = [Primitive(p.shape, p.params, T @ p.pose, p.op) for p in self.primitives]
        return ObjectModel(self.name, prims, self.truth)


def sdf_eval(m: ObjectModel, p) -> float | np.ndarray:
    return m.sdf(p)


def lipschitz_violation(m: ObjectModel, rng: np.random.Generator, n_pairs=2000, scale=5.0) -> float:
    """Largest sampled ``|f(a) - f(b)| / |a - b| - 1`` (should be <= 0.01)."""
    lo, hi = m.bounds()
    a = rng.uniform(lo - 5, hi + 5, size=(n_pairs, 3))
    b = a + rng.normal(scale=scale, size=a.shape)
    ratio = np.abs(m.sdf(a) - m.sdf(b)) / np.linalg.norm(a - b, axis=1)
    return float(ratio.max() - 1.0)


def _parse_floats(text, n, line_no, key):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ModelGrammarError(f"{key} expects {n} comma-separated numbers, got {text!r}", line_no) from None
    if len(vals) != n:
        raise ModelGrammarError(f"{key} expects {n} numbers, got {len(vals)}", line_no)
    return vals


def parse_model(text: str, default_name="object") -> ObjectModel:
    name = default_name
    truth = {}
    prims = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *tokens = line.split()
        if head == "name":
            if len(tokens) != 1:
                raise ModelGrammarError("name takes exactly one identifier", line_no)
            name = tokens[0]
            continue
        kv = {}
        for tok in tokens[1:] if head == "fit" else tokens:
            if "=" not in tok:
                raise ModelGrammarError(f"expected key=value, got {tok!r}", line_no)
            k, v = tok.split("=", 1)
            if k in kv:
                raise ModelGrammarError(f"duplicate key {k!r}", line_no)
            kv[k] = v
        if head == "fit":
            if not tokens:
                raise ModelGrammarError("fit needs a primitive kind", line_no)
            try:
                truth[tokens[0]] = {k: float(v) for k, v in kv.items()}
            except ValueError:
                raise ModelGrammarError("fit values must be numbers", line_no) from None
            continue
        if head not in SHAPE_KEYS:
            raise ModelGrammarError(f"unknown statement {head!r}", line_no)
        at = _parse_floats(kv.pop("at"), 3, line_no, "at") if "at" in kv else [0.0, 0.0, 0.0]
        rot = _parse_floats(kv.pop("rot"), 3, line_no, "rot") if "rot" in kv else [0.0, 0.0, 0.0]
        op = kv.pop("op", "union")
        try:
            params = {k: float(v) for k, v in kv.items()}
        except ValueError:
            raise ModelGrammarError(f"{head}: dimensions must be numbers", line_no) from None
        try:
            prims.append(Primitive(head, params, RigidTransform.from_euler(rot, at), op))
        except UsageError as e:
            raise ModelGrammarError(str(e), line_no) from None
    if not prims:
        raise ModelGrammarError("model defines no primitives")
    try:
        return ObjectModel(name, prims, truth)
    except UsageError as e:
        raise ModelGrammarError(str(e)) from None


def load_model(path) -> ObjectModel:
    path = Path(path)
    return parse_model(path.read_text(), default_name=path.stem)


BUNDLED_DIR = Path(__file__).with_name("models")


def bundled_model_names() -> list[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.shape"))


def bundled_model(name: str) -> ObjectModel:
    path = BUNDLED_DIR / f"{name}.shape"
    if not path.exists():
        raise UsageError(f"no bundled model {name!r}; choose from {bundled_model_names()}")
    return load_model(path)


def resolve_model(spec: str) -> ObjectModel:
    """Load ``spec`` as a file path, falling back to a bundled model name."""
    p = Path(spec)
    if p.exists():
        return load_model(p)
    return bundled_model(spec)
