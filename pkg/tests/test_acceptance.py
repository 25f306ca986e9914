"""End-to-end acceptance checks, one test per criterion.

Maps are built once per session from a calibration on the five training
shapes and shared between criteria. Each test prints a PASS/FAIL line,
collected again in the terminal summary.
"""

import time

import numpy as np
import pytest

from conftest import imprint_pairs
from tactile_map.cli import EXIT_OK, TRAINING_SHAPES, main
from tactile_map.geometry import PointCloud, RigidTransform, compose, corresponded_rmse
from tactile_map.local_shape import calibrate, estimate_local_shape, heightmap_rmse
from tactile_map.localization import (
    error_histogram,
    identify,
    leave_one_out_eval,
    map_fraction_study,
    pose_error,
    random_queries,
)
from tactile_map.mapping import (
    build_map,
    fit_primitive_params,
    load_map,
    map_to_bytes,
    merge_clouds,
    relative_errors,
    save_map,
)
from tactile_map.registration import icp
from tactile_map.sensor_sim import PhotometricModel, bundled_model, plan_grasp_grid

pytestmark = pytest.mark.slow

NOISE = 0.01
TRAIN_PER_SHAPE = 60
HELD_OUT_PER_SHAPE = 100
FRACTIONS = (0.1, 0.25, 0.5, 0.75, 1.0)
ID_OBJECTS = ("scissors", "tape", "brush")


@pytest.fixture(scope="module")
def training_sets():
    pm = PhotometricModel(noise_sigma=NOISE)
    return {
        name: (imprint_pairs(name, TRAIN_PER_SHAPE, 100 + k, pm), imprint_pairs(name, HELD_OUT_PER_SHAPE, 200 + k, pm))
        for k, name in enumerate(TRAINING_SHAPES)
    }


@pytest.fixture(scope="module")
def full_calibration(training_sets):
    return calibrate([p for train, _ in training_sets.values() for p in train])


_maps = {}


def object_map(name, cal):
    if name not in _maps:
        m = bundled_model(name)
        t0 = time.perf_counter()
        tmap = build_map(m, plan_grasp_grid(m), cal, seed=0)
        _maps[name] = (tmap, time.perf_counter() - t0)
    return _maps[name]


_loo = {}


def loo(name, cal, method):
    if (name, method) not in _loo:
        _loo[name, method] = leave_one_out_eval(object_map(name, cal)[0], method, seed=0)
    return _loo[name, method]


# ---- 1 --------------------------------------------------------------------------------


def test_c1_registration_exactness(verdict):
    rng = np.random.default_rng(2024)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(100):
        pts = rng.uniform(-25, 25, size=(1000, 3))
        axis = rng.normal(size=3)
        truth = RigidTransform.from_rotvec(axis / np.linalg.norm(axis) * rng.uniform(0, np.pi), rng.uniform(-50, 50, 3))
        dst = PointCloud(truth.apply(pts))
        axis = rng.normal(size=3)
        d = rng.normal(size=3)
        nudge = RigidTransform.from_rotvec(
            axis / np.linalg.norm(axis) * np.radians(rng.uniform(0, 2.0)), d / np.linalg.norm(d) * rng.uniform(0, 2.0)
        )
        res = icp(PointCloud(pts), dst, init=compose(nudge, truth))
        worst = max(worst, corresponded_rmse(PointCloud(res.transform.apply(pts)), dst))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 10.0
    verdict(1, ok, f"worst RMSE {worst:.2e} mm over 100 trials, {elapsed:.2f} s")
    assert ok


# ---- 2 --------------------------------------------------------------------------------


def test_c2_local_shape_accuracy(verdict, training_sets, full_calibration):
    rows, ok = [], True
    for name, (_, held) in training_sets.items():
        full = np.mean([heightmap_rmse(estimate_local_shape(img, full_calibration), hm) for img, hm in held])
        others = calibrate([p for other, (train, _) in training_sets.items() if other != name for p in train])
        hoo = np.mean([heightmap_rmse(estimate_local_shape(img, others), hm) for img, hm in held])
        good = full <= 0.1 and hoo <= 0.3 and hoo <= 3 * full
        ok &= good
        rows.append(f"{name} {full:.4f}/{hoo:.4f}")
    verdict(2, ok, f"mean RMSE mm (all shapes / held-out shape), {HELD_OUT_PER_SHAPE} imprints each: " + ", ".join(rows))
    assert ok


# ---- 3 --------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["cylinder", "semicone", "cuboid", "semipyramid"])
def test_c3_parameter_estimation(verdict, full_calibration, name):
    m = bundled_model(name)
    t0 = time.perf_counter()
    tmap, _ = object_map(name, full_calibration)
    kind, truth = next(iter(m.truth.items()))
    fit = fit_primitive_params(merge_clouds(tmap), kind)
    elapsed = time.perf_counter() - t0
    rel = relative_errors(fit, truth)
    ok = max(rel.values()) < 0.05 and elapsed < 300.0
    shown = ", ".join(f"{k} {fit.params[k]:.2f} ({100 * v:.2f}%)" for k, v in rel.items())
    verdict(3, ok, f"{name}: {shown}; {elapsed:.0f} s")
    assert ok


# ---- 4 --------------------------------------------------------------------------------


def test_c4_localization_ordering(verdict, full_calibration):
    med = {m: loo("scissors", full_calibration, m) for m in ("RANDOM", "CTI", "CTI-ICP-5")}
    below = {m: int(error_histogram(r.errors, 5.0, 80.0)[0]) for m, r in med.items()}
    r, c, i = med["RANDOM"].median, med["CTI"].median, med["CTI-ICP-5"].median
    ok = r >= 3 * c and 5.0 <= c <= 15.0 and i <= c and below["CTI-ICP-5"] > below["CTI"]
    verdict(
        4, ok, f"scissors medians RANDOM {r:.4f}, CTI {c:.4f}, CTI-ICP-5 {i:.4f} mm; "
        f"entries below 5 mm CTI {below['CTI']}, CTI-ICP-5 {below['CTI-ICP-5']}"
    )
    assert ok


# ---- 5 --------------------------------------------------------------------------------


def test_c5_map_size_trend(verdict, full_calibration):
    tmap, _ = object_map("scissors", full_calibration)
    pts = map_fraction_study(tmap, FRACTIONS, "CTI", seed=0, repeats=10)
    med = [p.median for p in pts]
    trend = all(b <= 1.15 * a for a, b in zip(med, med[1:]))
    ratio = med[0] / med[-1]
    ok = trend and ratio >= 1.5
    shown = ", ".join(f"{f:g}: {m:.2f}" for f, m in zip(FRACTIONS, med))
    verdict(5, ok, f"scissors CTI medians mm {shown}; 0.1 / full = {ratio:.2f}")
    assert ok


# ---- 6 --------------------------------------------------------------------------------


def test_c6_identification(verdict, full_calibration):
    maps = [object_map(n, full_calibration)[0] for n in ID_OBJECTS]
    rows, ok = [], True
    for k, name in enumerate(ID_OBJECTS):
        bound = loo(name, full_calibration, "CTI-ICP-5").median + 5.0
        correct, within = 0, 0
        for q, truth in random_queries(bundled_model(name), 30, seed=k + 1, cal=full_calibration):
            got = identify(q, maps)
            if got.map_index == k:
                correct += 1
                within += pose_error(q.local_cloud, truth, got.result.sensor_pose_world) <= bound
        good = correct >= 27 and within == correct
        ok &= good
        rows.append(f"{name} {correct}/30 identified, {within}/{correct} within {bound:.1f} mm")
    verdict(6, ok, "; ".join(rows))
    assert ok


# ---- 7 --------------------------------------------------------------------------------


def test_c7_persistence_and_determinism(verdict, full_calibration, tmp_path):
    tmap, _ = object_map("scissors", full_calibration)
    path = tmp_path / "scissors.tmap"
    save_map(tmap, path)
    back = load_map(path)
    exact = map_to_bytes(back) == path.read_bytes() == map_to_bytes(tmap)
    exact &= all(
        a.heightmap.depths.tobytes() == b.heightmap.depths.tobytes()
        and a.image.channels.tobytes() == b.image.channels.tobytes()
        and a.descriptor.values.tobytes() == b.descriptor.values.tobytes()
        and a.sensor_pose_world.rotation.tobytes() == b.sensor_pose_world.rotation.tobytes()
        and a.sensor_pose_world.translation.tobytes() == b.sensor_pose_world.translation.tobytes()
        for a, b in zip(tmap.entries, back.entries)
    )
    args = ["eval", "--maps", str(path), "--methods", "RANDOM,CTI,CTI-ICP-5", "--fractions", "0.25",
            "--repeats", "2", "--seed", "7", "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    first = (tmp_path / "eval.csv").read_bytes()
    assert main(args) == EXIT_OK
    same = (tmp_path / "eval.csv").read_bytes() == first
    ok = exact and same
    verdict(7, ok, f"round trip bit-exact: {exact}; eval CSV byte-identical over two runs: {same}")
    assert ok
