import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import blob_map
from tactile_map.errors import UsageError
from tactile_map.geometry import PointCloud, SensorIntrinsics
from tactile_map.localization import (
    LocalizationQuery,
    error_histogram,
    identify,
    leave_one_out_eval,
    localize_cti,
    localize_cti_icp,
    localize_random,
    map_fraction_study,
    parse_method,
    pose_error,
    random_queries,
    simulate_query,
)
from tactile_map.mapping import TactileMap, build_map
from tactile_map.registration import icp
from tactile_map.sensor_sim import grasp_at, parse_model

INTR = SensorIntrinsics()

# A plate with a scatter of broad low bumps (0.8 mm proud), so every spot on it feels different.
PLATE = parse_model(
    """
    box sx=20 sy=60 sz=60
    sphere radius=8.0 at=2.8,-12,20
    sphere radius=7.5 at=3.3,-5,26
    sphere radius=8.5 at=2.3,3,17
    sphere radius=7.8 at=3.0,9,29
    sphere radius=8.2 at=2.6,-8,34
    sphere radius=7.6 at=3.2,4,38
    sphere radius=8.0 at=2.8,12,31
    sphere radius=8.4 at=2.4,-3,44
    sphere radius=7.7 at=3.1,7,49
    sphere radius=8.3 at=2.5,-13,40
    sphere radius=7.9 at=2.9,13,45
    sphere radius=8.1 at=2.7,0,31
    """
)


@pytest.fixture(scope="module")
def plate_map(calibration):
    plan = [grasp_at(PLATE, 0, u, w, 0.0, INTR) for u in (-10.0, -5.0, 0.0, 5.0, 10.0) for w in range(15, 50, 5)]
    return build_map(PLATE, [g for g in plan if g is not None], calibration, seed=4)


def test_parse_method():
    assert parse_method("cti") == ("CTI", None)
    assert parse_method("CTI_ICP_5") == ("CTI-ICP", 5)
    assert parse_method("RANDOM") == ("RANDOM", None)
    for bad in ("CTI-ICP-0", "ICP", "CTI-ICP-"):
        with pytest.raises(UsageError):
            parse_method(bad)


def test_self_localization_is_exact(rng):
    tmap = blob_map(rng, 15)
    for i, e in enumerate(tmap.entries):
        q = LocalizationQuery.from_entry(e)
        r = localize_cti(q, tmap)
        assert r.matched_entry == i
        assert pose_error(e.local_cloud, e.sensor_pose_world, r.sensor_pose_world) == 0.0
        r = localize_cti_icp(q, tmap, 1)
        assert pose_error(e.local_cloud, e.sensor_pose_world, r.sensor_pose_world) < 1e-4


def test_self_query_icp_converges_at_once(plate_map):
    for i in (0, 11, 30):
        e = plate_map.entries[i]
        r = localize_cti_icp(LocalizationQuery.from_entry(e), plate_map, 1)
        assert r.icp_diag.converged and r.icp_diag.iterations <= 1
        assert pose_error(e.local_cloud, e.sensor_pose_world, r.sensor_pose_world) < 1e-4


def test_duplicate_entries_leave_one_out_is_zero(rng):
    e = blob_map(rng, 1).entries[0]
    tmap = TactileMap("dup", e.intrinsics, [e, e])
    for method in ("CTI", "RANDOM"):
        res = leave_one_out_eval(tmap, method)
        np.testing.assert_array_equal(res.errors, [0.0, 0.0])
    np.testing.assert_allclose(leave_one_out_eval(tmap, "CTI-ICP-1").errors, 0.0, atol=1e-9)


def test_random_baseline(rng):
    tmap = blob_map(rng, 12)
    a = localize_random(tmap, seed=7)
    assert localize_random(tmap, seed=7).matched_entry == a.matched_entry
    picks = {localize_random(tmap, seed=s).matched_entry for s in range(200)}
    assert picks == set(range(12))
    one = TactileMap("one", tmap.intrinsics, tmap.entries[:1])
    assert localize_random(one, seed=3).matched_entry == 0
    with pytest.raises(UsageError):
        localize_random(TactileMap("none", tmap.intrinsics, []), seed=0)
    with pytest.raises(UsageError):
        leave_one_out_eval(one)


def test_histogram_examples():
    np.testing.assert_array_equal(error_histogram([], 10.0, 80.0), np.zeros(9))
    h = error_histogram([5.0], 10.0, 80.0)
    assert h[0] == 1 and h.sum() == 1
    h = error_histogram([0.0, 9.99, 10.0, 80.0, 80.1], 10.0, 80.0)
    assert list(h) == [2, 1, 0, 0, 0, 0, 0, 1, 1]
    with pytest.raises(UsageError):
        error_histogram([1.0], 0.0)
    with pytest.raises(UsageError):
        error_histogram([-1.0])


@given(st.lists(st.floats(0, 200), max_size=60), st.floats(0.5, 20))
def test_histogram_conserves_count(errors, width):
    h = error_histogram(errors, width, 80.0)
    assert h.sum() == len(errors)
    assert h[-1] == sum(e > 80.0 for e in errors)


def test_full_neighbourhood_equals_plain_icp(plate_map):
    e = plate_map.entries[9]
    q = LocalizationQuery.from_entry(e)
    top = localize_cti(q, plate_map).sensor_pose_world
    r = localize_cti_icp(q, plate_map, len(plate_map))
    merged = [m.local_cloud.points @ m.sensor_pose_world.rotation.T + m.sensor_pose_world.translation for m in plate_map.entries]
    plain = icp(q.local_cloud, PointCloud(np.concatenate(merged)), init=top)
    assert r.sensor_pose_world.allclose(plain.transform, atol=0)


@pytest.mark.parametrize("u, w", [(0.0, 28.0), (-5.0, 33.0), (8.0, 40.0), (-7.0, 20.0)])
def test_refinement_beats_closest_imprint(calibration, plate_map, u, w):
    # 3 mm off one grid pose, so the nearest entry is 2 mm away
    q, truth = simulate_query(PLATE, 0, u, w, 0.0, calibration, noise_seed=11)
    cti = localize_cti(q, plate_map)
    ref = localize_cti_icp(q, plate_map, 5)
    e_cti = pose_error(q.local_cloud, truth, cti.sensor_pose_world)
    e_ref = pose_error(q.local_cloud, truth, ref.sensor_pose_world)
    assert e_cti == pytest.approx(2.0, abs=0.1)
    assert e_ref < e_cti


def test_leave_one_out_on_plate(plate_map):
    cti = leave_one_out_eval(plate_map, "CTI")
    ref = leave_one_out_eval(plate_map, "CTI-ICP-5")
    assert np.median(ref.errors) <= np.median(cti.errors)
    assert np.mean(ref.errors) <= 1.2 * np.mean(cti.errors)


def test_identify_picks_the_touched_object(calibration, plate_map):
    cyl = parse_model("cylinder radius=8 height=40")
    cmap = build_map(cyl, [g for g in (grasp_at(cyl, 0, 0.0, w, 0.0, INTR) for w in range(5, 40, 5)) if g], calibration)
    q, truth = simulate_query(PLATE, 0, 0.0, 30.0, 0.0, calibration, noise_seed=5)
    got = identify(q, [cmap, plate_map])
    assert got.object_id == plate_map.object_id and got.map_index == 1 and not got.ambiguous
    assert pose_error(q.local_cloud, truth, got.result.sensor_pose_world) < 1.0
    q, _ = simulate_query(cyl, 0, 0.0, 12.0, 0.0, calibration, noise_seed=6)
    assert identify(q, [cmap, plate_map]).map_index == 0


def test_identify_single_map_and_ties(rng):
    tmap = blob_map(rng, 6)
    q = LocalizationQuery.from_entry(tmap.entries[2])
    got = identify(q, [tmap])
    assert got.object_id == "blobs" and got.result.matched_entry == 2
    twin = TactileMap("twin", tmap.intrinsics, tmap.entries)
    got = identify(q, [tmap, twin])
    assert got.map_index == 0 and got.ambiguous
    got = identify(q, [twin, tmap])
    assert got.object_id == "twin" and got.ambiguous
    with pytest.raises(UsageError):
        identify(q, [])


def test_identify_falls_back_when_openings_disagree(rng):
    a = blob_map(rng, 5, object_id="a", openings=np.full(5, 10.0))
    b = blob_map(rng, 5, object_id="b", openings=np.full(5, 40.0))
    e = a.entries[3]
    q = LocalizationQuery(e.image, e.heightmap, e.descriptor, 25.0, e.local_cloud)
    got = identify(q, [b, a])
    assert got.object_id == "a"
    assert got.result.matched_entry == 3


def test_fraction_one_is_leave_one_out(plate_map):
    loo = leave_one_out_eval(plate_map, "CTI")
    (pt,) = map_fraction_study(plate_map, [1.0], "CTI")
    assert pt.map_size == len(plate_map)
    np.testing.assert_array_equal(pt.result.errors, loo.errors)


def test_fraction_study_pools_repeats(plate_map):
    N = len(plate_map)
    pts = map_fraction_study(plate_map, [0.2, 0.5], "CTI", seed=3, repeats=4)
    for pt in pts:
        k = int(round(pt.fraction * N))
        assert pt.map_size == k
        assert len(pt.result.errors) == 4 * (N - k)
    again = map_fraction_study(plate_map, [0.2, 0.5], "CTI", seed=3, repeats=4)
    for a, b in zip(pts, again):
        assert a.result.errors.tobytes() == b.result.errors.tobytes()
    capped = map_fraction_study(plate_map, [0.2], "CTI", seed=3, repeats=2, max_queries=5)
    assert len(capped[0].result.errors) == 10


def test_fraction_study_input_checks(plate_map):
    for bad in ([0.0], [1.5]):
        with pytest.raises(UsageError):
            map_fraction_study(plate_map, bad)
    with pytest.raises(UsageError):
        map_fraction_study(plate_map, [0.5], repeats=0)


def test_random_queries_are_seeded(calibration):
    cyl = parse_model("cylinder radius=8 height=30")
    a = random_queries(cyl, 3, seed=2, cal=calibration)
    b = random_queries(cyl, 3, seed=2, cal=calibration)
    for (qa, ta), (qb, tb) in zip(a, b):
        assert qa.local_cloud.points.tobytes() == qb.local_cloud.points.tobytes()
        assert ta.allclose(tb, atol=0)
        # every query grasp actually touches the object
        assert np.abs(cyl.sdf(ta.apply(qa.local_cloud.points))).max() < 0.5
