import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beachbot.kinematics import forward_cartesian
from beachbot.scene import EffectorState, ground_pixel
from beachbot.segmentation import (
    LED,
    NIR_LAMP,
    SceneImage,
    SegmentationParams,
    detect_candidates,
    detect_nir_spot,
    read_ppm,
    write_ppm,
)
from beachbot.servo import move_deltas
from helpers import particle_at, sim_with, spot_xy

MPP = 0.1 / (160 / np.tan(np.radians(40)))
SEG = SegmentationParams.for_camera(MPP)
OFFSET = (0.006, -0.004)


def scene_with(color, size_mm=3.0, seed=0):
    sx, sy = spot_xy()
    p = particle_at((sx + OFFSET[0], sy + OFFSET[1]), size_mm, color)
    sim = sim_with([p], seed=seed)
    return sim, p


@pytest.mark.parametrize("color", ["blue", "red", "green"])
def test_colored_particle_found_at_projection(color):
    sim, p = scene_with(color)
    dets = detect_candidates(sim.render(LED), SEG)
    assert len(dets) == 1
    expect = ground_pixel(sim.pose, sim.intr, sim.cal, p.position)
    assert (dets[0].centroid - expect).norm() <= 1.0
    d = dets[0]
    assert d.area >= SEG.min_area
    assert d.bbox[0] <= d.centroid.u <= d.bbox[2] and d.bbox[1] <= d.centroid.v <= d.bbox[3]


def test_dim_yellow_is_missed():
    sim, _ = scene_with("dim_yellow")
    assert detect_candidates(sim.render(LED), SEG) == []


def test_empty_sand():
    for seed in range(5):
        assert detect_candidates(sim_with(seed=seed).render(LED), SEG) == []


def test_one_mm_floor():
    sim, _ = scene_with("red", size_mm=1.0)
    assert len(detect_candidates(sim.render(LED), SEG)) == 1
    strict = SegmentationParams.for_camera(MPP, min_particle_m=2e-3)
    assert detect_candidates(sim.render(LED), strict) == []


def test_nir_spot_diameter():
    sim = sim_with(lamp=True)
    for drop in (0.004, 0.008, 0.012):
        w = sim.state
        goal = forward_cartesian(sim.geom, w.q).as_array() + (0, 0, drop)
        sim.state = EffectorState(w.q + move_deltas(sim.geom, w.q, goal), lamp=True)
        pz = sim.pose
        r_px = sim.rig.nir.spot_radius(pz.defocus) * sim.intr.omega / pz.camera_height
        spot = detect_nir_spot(sim.render(NIR_LAMP), SEG)
        assert spot.kind == "nir_spot"
        assert spot.spot_diameter == pytest.approx(2 * r_px, rel=0.1)
        sim.state = w


def test_no_lamp_no_spot():
    assert detect_nir_spot(sim_with().render(LED), SEG) is None


def synthetic(blobs, shape=(120, 160), illumination=LED):
    hsv = np.zeros(shape + (3,))
    hsv[..., 0] = 45.0
    hsv[..., 1] = 0.2
    hsv[..., 2] = 0.5
    v, u = np.mgrid[0:shape[0], 0:shape[1]]
    for (cu, cv, r, color) in blobs:
        hsv[(u - cu) ** 2 + (v - cv) ** 2 <= r * r] = color
    return SceneImage(hsv, illumination)


def test_two_spots_larger_wins():
    img = synthetic([(40, 40, 4, (10, 0.2, 0.97)), (110, 70, 7, (10, 0.2, 0.97))], illumination=NIR_LAMP)
    spot = detect_nir_spot(img, SEG)
    assert spot.centroid.u == pytest.approx(110, abs=0.5) and spot.centroid.v == pytest.approx(70, abs=0.5)


def test_sorted_by_area():
    blue = (220, 0.8, 0.6)
    img = synthetic([(30, 30, 3, blue), (100, 60, 6, blue), (60, 90, 4, blue)])
    areas = [d.area for d in detect_candidates(img, SEG)]
    assert areas == sorted(areas, reverse=True) and len(areas) == 3


def test_ring_child_and_circularity():
    blue = (220, 0.8, 0.6)
    hsv = synthetic([]).hsv.copy()
    v, u = np.mgrid[0:120, 0:160]
    rr = (u - 80) ** 2 + (v - 60) ** 2
    hsv[(rr <= 144) & (rr >= 64)] = blue  # ring
    hsv[rr <= 4] = blue  # dot inside the hole
    hsv[10:12, 10:60] = blue  # thin line fails circularity
    dets = detect_candidates(SceneImage(hsv), SEG)
    assert len(dets) == 1
    assert dets[0].centroid.u == pytest.approx(80, abs=0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(-30, 30), st.integers(-20, 20))
def test_translation_equivariance(du, dv):
    sim, _ = scene_with("green")
    img = sim.render(LED)
    base = detect_candidates(img, SEG)[0].centroid
    moved = detect_candidates(SceneImage(np.roll(img.hsv, (dv, du), axis=(0, 1))), SEG)
    assert len(moved) == 1
    assert moved[0].centroid.u == pytest.approx(base.u + du, abs=1.0)
    assert moved[0].centroid.v == pytest.approx(base.v + dv, abs=1.0)


def test_blue_under_lamp_is_hidden():
    sx, sy = spot_xy()
    sim = sim_with([particle_at((sx, sy), 3.0, "blue")], lamp=True)
    img = sim.render(NIR_LAMP)
    assert detect_candidates(img, SEG) == []


def test_determinism():
    sim, _ = scene_with("red")
    assert detect_candidates(sim.render(LED), SEG) == detect_candidates(sim.render(LED), SEG)


def test_image_validation():
    with pytest.raises(ValueError):
        SceneImage(np.zeros((4, 4)))
    bad = np.zeros((4, 4, 3))
    bad[0, 0, 0] = 360.0
    with pytest.raises(ValueError):
        SceneImage(bad)
    bad = np.zeros((4, 4, 3))
    bad[0, 0, 1] = 1.5
    with pytest.raises(ValueError):
        SceneImage(bad)
    with pytest.raises(ValueError):
        SceneImage(np.zeros((4, 4, 3)), "UV")


def test_ppm_round_trip(tmp_path):
    sim, p = scene_with("blue")
    img = sim.render(LED)
    write_ppm(img, tmp_path / "f.ppm")
    back = read_ppm(tmp_path / "f.ppm")
    assert back.size == img.size
    a, b = detect_candidates(img, SEG), detect_candidates(back, SEG)
    assert len(a) == len(b) == 1
    assert (a[0].centroid - b[0].centroid).norm() <= 0.5
