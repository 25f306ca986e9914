import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_transform(rng, max_angle_deg=180.0, max_shift=50.0):
    from tactile_map.geometry import RigidTransform

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_angle_deg))
    return RigidTransform.from_rotvec(axis * angle, rng.uniform(-max_shift, max_shift, size=3))


def imprint_pairs(name, n, seed, pm=None, intr=None):
    """Simulated (image, true heightmap) pairs from random presses on a bundled shape."""
    from tactile_map.geometry import SensorIntrinsics
    from tactile_map.sensor_sim import PhotometricModel, bundled_model, render_tactile_image, simulate_contact
    from tactile_map.sensor_sim.grasps import sample_touches

    intr = intr or SensorIntrinsics()
    pm = pm or PhotometricModel()
    m = bundled_model(name)
    out = []
    for k, pose in enumerate(sample_touches(m, n, seed, intr)):
        hm = simulate_contact(m, pose, intr)
        out.append((render_tactile_image(hm, pm, seed=[seed, k]), hm))
    return out


@pytest.fixture(scope="session")
def calibration():
    from tactile_map.local_shape import calibrate

    return calibrate(imprint_pairs("sphere", 30, 21) + imprint_pairs("cone1", 20, 22))


def blob_map(rng, n, intr=None, object_id="blobs", openings=None):
    """A map of ``n`` random Gaussian-bump imprints at random poses (no simulation)."""
    from tactile_map.geometry import Heightmap, SensorIntrinsics, TactileImage
    from tactile_map.mapping import TactileMap, make_entry

    intr = intr or SensorIntrinsics(width=24, height=20)
    jj, ii = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    entries = []
    for k in range(n):
        ci, cj = rng.uniform(4, intr.height - 4), rng.uniform(4, intr.width - 4)
        s = rng.uniform(1.5, 4.0)
        d = rng.uniform(0.3, 1.8) * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * s * s)) - 0.05
        hm = Heightmap.from_depths(d, intr.pixel_pitch, intr.gel_max_indentation)
        img = TactileImage(np.full((3, intr.height, intr.width), 0.5, np.float32))
        op = rng.uniform(10, 20) if openings is None else openings[k]
        entries.append(make_entry(img, hm, random_transform(rng), op, intr))
    return TactileMap(object_id, intr, entries)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def verdict():
    """Record and print one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
