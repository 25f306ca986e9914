import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from conftest import random_transform
from tactile_map.errors import ConfigurationError, ModelGrammarError, UsageError
from tactile_map.geometry import Heightmap, RigidTransform, SensorIntrinsics
from tactile_map.sensor_sim import (
    ObjectModel,
    PhotometricModel,
    Primitive,
    bundled_model,
    candidate_grid,
    grasp_at,
    parse_model,
    plan_grasp_grid,
    render_tactile_image,
    sdf_eval,
    simulate_contact,
)
from tactile_map.sensor_sim.grasps import sample_touches
from tactile_map.sensor_sim.sdf import bundled_model_names, lipschitz_violation

INTR = SensorIntrinsics()


def sphere(r, at=(0.0, 0.0, 0.0)):
    return ObjectModel("s", (Primitive("sphere", {"radius": r}, RigidTransform.from_translation(at)),))


def pixel_radius(intr=INTR):
    g = intr.grid_points()
    return np.hypot(g[..., 0], g[..., 1]), g


# ---- signed distances -------------------------------------------------------


def test_sphere_sdf_examples():
    m = sphere(25)
    assert sdf_eval(m, (0, 0, 0)) == -25
    assert sdf_eval(m, (50, 0, 0)) == 25


def test_union_is_min_of_parts(rng):
    a = Primitive("sphere", {"radius": 10}, RigidTransform.from_translation((-6, 0, 0)))
    b = Primitive("sphere", {"radius": 7}, RigidTransform.from_translation((8, 3, 1)))
    p = rng.uniform(-25, 25, size=(100, 3))
    both = ObjectModel("u", (a, b)).sdf(p)
    da = np.linalg.norm(p - (-6, 0, 0), axis=1) - 10
    db = np.linalg.norm(p - (8, 3, 1), axis=1) - 7
    np.testing.assert_allclose(both, np.minimum(da, db), atol=1e-12)


def test_subtract_is_max_with_negated_part(rng):
    a = Primitive("box", {"sx": 20, "sy": 20, "sz": 20})
    b = Primitive("cylinder", {"radius": 4, "height": 30}, RigidTransform.from_translation((0, 0, -5)), op="subtract")
    p = rng.uniform(-15, 25, size=(200, 3))
    np.testing.assert_allclose(ObjectModel("d", (a, b)).sdf(p), np.maximum(a.sdf(p), -b.sdf(p)), atol=1e-12)


def _surface_samples(prim, step=0.1):
    """Dense points on the boundary of a single primitive, in its own frame."""
    P = prim.params
    pts = []
    if prim.shape == "cylinder":
        r, h = P["radius"], P["height"]
        th = np.arange(0, 2 * np.pi, step / r)
        z = np.arange(0, h + step, step)
        T, Z = np.meshgrid(th, z)
        pts.append(np.stack([r * np.cos(T), r * np.sin(T), Z], -1).reshape(-1, 3))
        for zc in (0.0, h):
            rr = np.arange(0, r + step, step)
            for ri in rr:
                t = np.arange(0, 2 * np.pi, step / max(ri, step))
                pts.append(np.stack([ri * np.cos(t), ri * np.sin(t), np.full_like(t, zc)], -1))
    elif prim.shape == "cone":
        r1, h = P["base_radius"], P["height"]
        r2 = r1 - h * np.tan(np.radians(P["slope"]))
        for s in np.arange(0, 1 + 1e-9, step / np.hypot(h, r1 - r2)):
            rr, zz = r1 + s * (r2 - r1), s * h
            t = np.arange(0, 2 * np.pi, step / max(rr, step))
            pts.append(np.stack([rr * np.cos(t), rr * np.sin(t), np.full_like(t, zz)], -1))
        for rc, zc in ((r1, 0.0), (r2, h)):
            for ri in np.arange(0, rc + step, step):
                ri = min(ri, rc)
                t = np.arange(0, 2 * np.pi, step / max(ri, step))
                pts.append(np.stack([ri * np.cos(t), ri * np.sin(t), np.full_like(t, zc)], -1))
    elif prim.shape == "pyramid_frustum":
        a, h = P["base_side"] / 2, P["height"]
        b = a - h * np.tan(np.radians(P["slope"]))
        for zz in np.arange(0, h + step / 2, step / 2):
            half = a + (b - a) * zz / h
            s = np.arange(-half, half + step / 2, step / 2)
            for x, y in ((s, np.full_like(s, half)), (s, np.full_like(s, -half)), (np.full_like(s, half), s), (np.full_like(s, -half), s)):
                pts.append(np.stack([x, y, np.full_like(s, zz)], -1))
        for half, zc in ((a, 0.0), (b, h)):
            s = np.arange(-half, half + step / 2, step / 2)
            X, Y = np.meshgrid(s, s)
            pts.append(np.stack([X.ravel(), Y.ravel(), np.full(X.size, zc)], -1))
    return np.concatenate(pts)


@pytest.mark.parametrize(
    "prim",
    [
        Primitive("cylinder", {"radius": 6, "height": 10}),
        Primitive("cone", {"base_radius": 8, "slope": 30, "height": 6}),
        Primitive("pyramid_frustum", {"base_side": 12, "slope": 25, "height": 5}),
    ],
    ids=lambda p: p.shape,
)
def test_single_primitive_distance_matches_dense_surface(prim, rng):
    surf = _surface_samples(prim)
    tree = cKDTree(surf)
    lo, hi = prim.local_bounds()
    p = rng.uniform(lo - 4, hi + 4, size=(400, 3))
    d = prim.local_sdf(p)
    near, _ = tree.query(p)
    # sampling spacing bounds how far the dense oracle can overshoot
    assert np.all(np.abs(np.abs(d) - near) < 0.08)


def test_box_sdf_exact():
    box = Primitive("box", {"sx": 4, "sy": 6, "sz": 2})
    q = np.array([[0, 0, 1], [5, 0, 1], [0, 0, -3], [3, 4, 3], [1.5, 0, 1]], dtype=float)
    np.testing.assert_allclose(box.local_sdf(q), [-1, 3, 3, np.sqrt(1 + 1 + 1), -0.5], atol=1e-12)


@pytest.mark.parametrize("name", bundled_model_names())
def test_bundled_models_are_lipschitz(name):
    assert lipschitz_violation(bundled_model(name), np.random.default_rng(0)) <= 0.01


@given(st.integers(0, 2**32 - 1))
def test_rigid_motion_of_model_moves_its_distance_field(seed):
    rng = np.random.default_rng(seed)
    m = bundled_model("hollow")
    T = random_transform(rng)
    p = rng.uniform(-20, 20, size=(50, 3))
    np.testing.assert_allclose(m.transformed(T).sdf(T.apply(p)), m.sdf(p), atol=1e-9)


# ---- model grammar ----------------------------------------------------------


def test_parse_model_with_comments_and_fit():
    m = parse_model("name thing  # c\n\nfit cylinder radius=3\ncylinder radius=3 height=5 at=1,2,3 rot=0,0,90\n")
    assert m.name == "thing"
    assert m.truth == {"cylinder": {"radius": 3.0}}
    assert m.sdf((1, 2, 5.5)) == pytest.approx(-2.5)


@pytest.mark.parametrize(
    "text, line",
    [
        ("sphere radius=1\nblob radius=2", 2),
        ("sphere radius=one", 1),
        ("sphere", 1),
        ("sphere radius=1 radius=2", 1),
        ("sphere radius=1 height=2", 1),
        ("cylinder radius=1 height=2 at=1,2", 1),
        ("sphere radius=-1", 1),
        ("cone base_radius=5 slope=95 height=1", 1),
        ("cone base_radius=5 slope=80 height=10", 1),
        ("sphere radius=1 op=intersect", 1),
        ("sphere radius=1\nfit", 2),
        ("name a b\nsphere radius=1", 1),
    ],
)
def test_grammar_errors_report_line(text, line):
    with pytest.raises(ModelGrammarError) as e:
        parse_model(text)
    assert e.value.line_number == line


def test_grammar_errors_without_line():
    with pytest.raises(ModelGrammarError):
        parse_model("# nothing\n")
    with pytest.raises(ModelGrammarError):
        parse_model("sphere radius=1 op=subtract")


def test_unknown_bundled_model():
    with pytest.raises(UsageError):
        bundled_model("teapot")


# ---- contact ----------------------------------------------------------------


def test_object_behind_gel_plane_gives_empty_heightmap():
    hm = simulate_contact(sphere(25, (0, 0, 30)), RigidTransform.identity(), INTR)
    assert not hm.mask.any()
    assert np.all(hm.depths == 0)


def test_flat_box_pressed_one_mm():
    box = ObjectModel("b", (Primitive("box", {"sx": 10, "sy": 6, "sz": 5}, RigidTransform.from_translation((0, 0, -1))),))
    hm = simulate_contact(box, RigidTransform.identity(), INTR)
    _, g = pixel_radius()
    inside = (np.abs(g[..., 0]) < 5) & (np.abs(g[..., 1]) < 3)
    np.testing.assert_array_equal(hm.mask, inside)
    np.testing.assert_allclose(hm.depths[inside], 1.0, atol=1e-6)


def test_sphere_press_gives_spherical_cap():
    r, press = 25.0, 2.0
    hm = simulate_contact(sphere(r, (0, 0, r - press)), RigidTransform.identity(), INTR)
    rho, _ = pixel_radius()
    disc = np.sqrt(2 * r * press - press**2)
    assert disc == pytest.approx(9.8, abs=0.01)
    np.testing.assert_array_equal(hm.mask, rho < disc)
    cap = press - (r - np.sqrt(np.maximum(r * r - rho * rho, 0)))
    np.testing.assert_allclose(hm.depths[hm.mask], cap[hm.mask], atol=1e-6)


@given(st.floats(0.1, 8.0), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 25))
def test_depth_never_exceeds_max_indentation(press, x, y, tilt):
    pose = RigidTransform.from_euler((tilt, 0, 0), (x, y, 0))
    hm = simulate_contact(sphere(10, (0, 0, 10 - press)), pose, INTR)
    assert hm.depths.max() <= INTR.gel_max_indentation
    np.testing.assert_array_equal(hm.mask, hm.depths > 0)


@given(st.floats(0.2, 1.5), st.floats(0.01, 0.5))
def test_deeper_press_grows_mask(press, extra):
    shallow = simulate_contact(sphere(10, (1, -2, 10 - press)), RigidTransform.identity(), INTR)
    deep = simulate_contact(sphere(10, (1, -2, 10 - press - extra)), RigidTransform.identity(), INTR)
    assert np.all(deep.mask[shallow.mask])
    assert np.all(deep.depths >= shallow.depths)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_contact_is_frame_equivariant(seed):
    rng = np.random.default_rng(seed)
    m = bundled_model("semicone")
    g = grasp_at(m, int(rng.integers(4)), rng.uniform(-5, 5), rng.uniform(10, 50), rng.uniform(-20, 20), INTR)
    assert g is not None
    T = random_transform(rng)
    a = simulate_contact(m, g.sensor_pose, INTR)
    b = simulate_contact(m.transformed(T), T @ g.sensor_pose, INTR)
    assert a.mask.any()
    np.testing.assert_array_equal(a.depths, b.depths)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_contact_is_deterministic():
    m = bundled_model("pyramid")
    pose = sample_touches(m, 1, seed=3)[0]
    a = simulate_contact(m, pose, INTR)
    b = simulate_contact(m, pose, INTR)
    assert a.depths.tobytes() == b.depths.tobytes()


def test_sample_touches_make_contact():
    m = bundled_model("cone1")
    for pose in sample_touches(m, 5, seed=1):
        hm = simulate_contact(m, pose, INTR)
        assert hm.mask.sum() > 20


# ---- photometric rendering ----------------------------------------------------


def _shade_pixel(pm, gx, gy):
    n = np.array([-gx, -gy, 1.0])
    n /= np.linalg.norm(n)
    return [min(max(pm.ambient + pm.albedo[c] * max(0.0, float(n @ pm.light_dirs[c])), 0.0), 1.0) for c in range(3)]


def test_flat_heightmap_renders_flat_color():
    pm = PhotometricModel(noise_sigma=0.0)
    img = render_tactile_image(Heightmap.empty(INTR), pm)
    expected = pm.ambient + pm.albedo * pm.light_dirs[:, 2]
    for c in range(3):
        np.testing.assert_allclose(img.channels[c], expected[c], atol=1e-6)
    noisy = render_tactile_image(Heightmap.empty(INTR), PhotometricModel(), seed=0)
    assert abs(noisy.channels.mean(axis=(1, 2)) - expected).max() < 1e-3


def test_tilted_plane_renders_constant_channels():
    _, g = pixel_radius()
    d = 1.0 + 0.05 * g[..., 0] - 0.02 * g[..., 1]
    hm = Heightmap.from_depths(d, INTR.pixel_pitch, INTR.gel_max_indentation)
    img = render_tactile_image(hm, PhotometricModel(noise_sigma=0.0))
    for c in range(3):
        assert np.ptp(img.channels[c]) < 1e-5
    np.testing.assert_allclose(img.channels[:, 5, 5], _shade_pixel(PhotometricModel(noise_sigma=0.0), 0.05, -0.02), atol=1e-5)


def test_paraboloid_matches_per_pixel_shading():
    pm = PhotometricModel(noise_sigma=0.0)
    rho, _ = pixel_radius()
    hm = Heightmap.from_depths(np.maximum(1.5 - rho**2 / 40.0, 0.0), INTR.pixel_pitch, INTR.gel_max_indentation)
    img = render_tactile_image(hm, pm)
    d = hm.depths.astype(np.float64)
    h, w = d.shape
    p = INTR.pixel_pitch
    rows = np.random.default_rng(0).integers(0, h, 150)
    cols = np.random.default_rng(1).integers(0, w, 150)
    for i, j in zip(rows, cols):
        jl, jr = max(j - 1, 0), min(j + 1, w - 1)
        il, ir = max(i - 1, 0), min(i + 1, h - 1)
        gx = (d[i, jr] - d[i, jl]) / ((jr - jl) * p)
        gy = (d[ir, j] - d[il, j]) / ((ir - il) * p)
        np.testing.assert_allclose(img.channels[:, i, j], _shade_pixel(pm, gx, gy), atol=1e-6)


def test_render_is_seeded():
    rho, _ = pixel_radius()
    hm = Heightmap.from_depths(np.maximum(1.0 - rho**2 / 30.0, 0.0), INTR.pixel_pitch, INTR.gel_max_indentation)
    a = render_tactile_image(hm, PhotometricModel(), seed=7)
    b = render_tactile_image(hm, PhotometricModel(), seed=7)
    c = render_tactile_image(hm, PhotometricModel(), seed=8)
    assert a.channels.tobytes() == b.channels.tobytes()
    assert a.channels.tobytes() != c.channels.tobytes()


def test_photometric_model_validation():
    with pytest.raises(ConfigurationError):
        PhotometricModel(light_dirs=np.array([[0, 0, 1.0], [0, 0, 1.0], [1.0, 0, 0]]))
    with pytest.raises(ConfigurationError):
        PhotometricModel(albedo=np.array([0.5, 0.0, 0.5]))
    with pytest.raises(ConfigurationError):
        PhotometricModel(ambient=1.0)


# ---- grasp planning -----------------------------------------------------------


def test_grid_pitch_on_cylinder():
    m = parse_model("cylinder radius=25 height=40")
    plan = plan_grasp_grid(m, spacing=10.0, yaw_angles=(0.0,))
    assert len(plan) > 0
    for face in range(4):
        poses = {g.grid_uv: g.sensor_pose for g in plan if g.face == face}
        for (u, w), pose in poses.items():
            up = poses.get((u, w + 10.0))
            if up is not None:
                assert np.linalg.norm(up.translation - pose.translation) == pytest.approx(10.0, abs=1e-6)
            right = poses.get((u + 10.0, w))
            if right is not None:
                step = right.translation - pose.translation
                assert step @ pose.rotation[:, 0] == pytest.approx(10.0, abs=1e-6)


def test_yaw_replication_triples_candidates():
    m = bundled_model("cuboid")
    one = candidate_grid(m, 10.0, (0.0,))
    three = candidate_grid(m, 10.0, (0.0, 20.0, -20.0))
    assert len(three) == 3 * len(one)
    with pytest.raises(UsageError):
        candidate_grid(m, 0.0, (0.0,))


def test_planned_grasps_all_touch():
    m = bundled_model("sphere")
    plan = plan_grasp_grid(m, spacing=10.0, yaw_angles=(0.0, 20.0))
    assert plan
    for g in plan:
        assert g.gripper_opening >= 0
        assert simulate_contact(m, g.sensor_pose, INTR).mask.any()


def test_opening_follows_thickness():
    m = parse_model("box sx=30 sy=30 sz=30")
    g = grasp_at(m, 0, 0.0, 15.0, 0.0, INTR)
    # both jaws sink the default 1 mm into a 30 mm part
    assert g.gripper_opening == pytest.approx(28.0, abs=1e-6)
