import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beachbot.errors import LampOffError, ReferenceContaminatedError
from beachbot.kinematics import NOMINAL_Q, JointConfig, forward_cartesian
from beachbot.scene import (
    ActuationModel,
    Bump,
    EffectorState,
    NirGeometry,
    Particle,
    Scene,
    Terrain,
    arm_origin,
    focus_scatter_prediction,
    step_arm,
)
from beachbot.segmentation import LED, NIR_LAMP, SegmentationParams, detect_candidates, detect_nir_spot
from beachbot.servo import move_deltas
from beachbot.spectra import absorbance, assess
from helpers import QUIET, particle_at, sim_with, spot_xy

SEG = SegmentationParams.for_camera(0.1 / (160 / math.tan(math.radians(40))))


def set_height(sim, dz):
    q = sim.state.q
    goal = forward_cartesian(sim.geom, q).as_array() + (0, 0, dz)
    sim.state = EffectorState(q + move_deltas(sim.geom, q, goal), sim.state.rover, lamp=sim.state.lamp)


def focus_on_ground(sim, extra=0.0):
    for _ in range(2):
        set_height(sim, extra - sim.pose.defocus)


def test_zero_deltas_zero_noise_keeps_state():
    sim = sim_with()
    before = sim.state
    after = step_arm(sim.scene, before, (0, 0, 0), np.random.default_rng(0), QUIET)
    assert after.q == before.q and after.lamp == before.lamp and after.settled and not after.limit_hit


def test_noise_free_focus_is_pure_kinematics():
    rng = np.random.default_rng(1)
    sim = sim_with()
    for _ in range(50):
        sim.step(rng.normal(0, 0.02, 3))
        expect = arm_origin(sim.scene, sim.rig, sim.state.rover) + forward_cartesian(sim.geom, sim.state.q).as_array()
        expect[2] -= sim.rig.focus_drop
        assert np.array_equal(sim.pose.focus, expect)


def test_actuation_scatter_matches_linearization():
    act = ActuationModel(2e-4, 0.0)
    sim = sim_with(actuation=act)
    rng = np.random.default_rng(2)
    start = sim.state
    pts = np.array([
        sim_pose_focus(sim, step_arm(sim.scene, start, (0, 0, 0), rng, act)) for _ in range(1000)
    ])
    predicted = focus_scatter_prediction(sim.geom, start.q, 2e-4)
    assert pts.std(axis=0) == pytest.approx(predicted, rel=0.2)


def sim_pose_focus(sim, state):
    sim.state = state
    return sim.pose.focus


def test_limits_clamp():
    sim = sim_with()
    s = step_arm(sim.scene, sim.state, (3.0, 0, 0), np.random.default_rng(0), QUIET)
    assert s.limit_hit and s.q.gamma0 == pytest.approx(NOMINAL_Q.gamma0 + math.pi / 2)
    with pytest.raises(ValueError):
        step_arm(sim.scene, sim.state, (math.nan, 0, 0), np.random.default_rng(0), QUIET)


def test_particle_at_focus_projects_to_target_pixel():
    sx, sy = spot_xy()
    sim = sim_with([particle_at((sx, sy), 3.0, "red")])
    dets = detect_candidates(sim.render(LED), SEG)
    assert len(dets) == 1
    assert (dets[0].centroid - sim.target_pixel()).norm() <= 1.0


def test_blue_particle_goes_dark_under_lamp():
    sx, sy = spot_xy()
    p = particle_at((sx, sy), 1.2, "blue")
    sim = sim_with([p], lamp=True)
    focus_on_ground(sim, 0.004)  # spot wide enough to cover the particle
    img = sim.render(NIR_LAMP)
    v, u = np.mgrid[0:240, 0:320]
    from beachbot.scene import pixel_ground
    gx, gy = pixel_ground(sim.pose, sim.intr, sim.cal, u, v)
    inside = (gx - sx) ** 2 + (gy - sy) ** 2 <= p.radius ** 2
    assert inside.sum() > 5
    assert img.value[inside].max() < 0.1


def test_render_determinism():
    sx, sy = spot_xy()
    a = sim_with([particle_at((sx + 0.004, sy), 2.0, "green")], seed=3)
    b = sim_with([particle_at((sx + 0.004, sy), 2.0, "green")], seed=3)
    assert np.array_equal(a.render(LED).hsv, b.render(LED).hsv)
    assert np.array_equal(a.render(NIR_LAMP).hsv, b.render(NIR_LAMP).hsv)


def test_large_particle_in_focus_dominates_footprint():
    sx, sy = spot_xy()
    sim = sim_with([particle_at((sx, sy), 5.0, "blue", "PP")], lamp=True)
    focus_on_ground(sim)
    w = sim.sample().weights
    assert w["PP"] >= 0.9


def test_bare_sand_footprint():
    sim = sim_with(lamp=True)
    assert sim.sample().weights == {"sand": 1.0}


def test_lamp_off_rejected():
    with pytest.raises(LampOffError):
        sim_with().sample()


def absorbance_at(defocus_mm, seed=0):
    sx, sy = spot_xy()
    sim = sim_with([particle_at((sx, sy), 5.0, "blue", "PP")], lamp=True, seed=seed)
    focus_on_ground(sim)
    # reference on sand 20 mm away at focus, then back over the particle
    home = sim.state
    q = home.q
    goal = forward_cartesian(sim.geom, q).as_array() + (0, 0.02, 0)
    sim.state = EffectorState(q + move_deltas(sim.geom, q, goal), lamp=True)
    ref, dark = sim.reference()
    sim.state = home
    focus_on_ground(sim, 1e-3 * defocus_mm)
    s = sim.sample()
    return assess(s.sample, s.dark, ref, sim.spectrometer)


def test_focus_offset_validity_cliff():
    assert absorbance_at(0.0).valid
    assert not absorbance_at(1.0).valid


def test_reference_on_clean_sand():
    sim = sim_with(lamp=True)
    focus_on_ground(sim)
    ref, dark = sim.reference()
    s = sim.sample()
    a = absorbance(s.sample, s.dark, ref)
    sigma = math.log10(math.e) * math.sqrt(2) * sim.spectrometer.noise_floor / (ref.intensities - dark.intensities).mean()
    assert abs(np.nanmean(a.intensities)) < 5 * sigma / math.sqrt(len(a.grid)) + 1e-12
    assert np.nanstd(a.intensities) < 2 * sigma


def test_reference_contaminated():
    sx, sy = spot_xy()
    sim = sim_with([particle_at((sx, sy), 2.0)], lamp=True)
    focus_on_ground(sim)
    with pytest.raises(ReferenceContaminatedError):
        sim.reference()


def test_reference_repeatable_per_seed():
    a, b = sim_with(lamp=True, seed=5), sim_with(lamp=True, seed=5)
    ra, da = a.reference()
    rb, db = b.reference()
    assert np.array_equal(ra.intensities, rb.intensities) and np.array_equal(da.intensities, db.intensities)


def test_spot_diameter_shrinks_toward_focus():
    sim = sim_with(lamp=True)
    focus_on_ground(sim)
    diam = []
    for drop in (0.016, 0.012, 0.008, 0.004, 0.002):
        set_height(sim, drop)
        diam.append(detect_nir_spot(sim.render(NIR_LAMP), SEG).spot_diameter)
        set_height(sim, -drop)
    assert all(a > b for a, b in zip(diam, diam[1:]))


@given(st.floats(-0.01, 0.01), st.floats(-0.01, 0.01))
def test_nir_geometry_shape(a, b):
    g = NirGeometry()
    assert g.spot_radius(0) <= g.spot_radius(a)
    assert g.signal_gain(0) == 1.0
    if abs(a) + 1e-9 < abs(b):
        assert g.spot_radius(a) < g.spot_radius(b)
        assert g.signal_gain(a) >= g.signal_gain(b)


def test_gain_at_one_millimetre_is_small():
    assert NirGeometry().signal_gain(1e-3) == pytest.approx(math.exp(-6.25))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_random_terrain_respects_slope(seed):
    t = Terrain.random(np.random.default_rng(seed))
    assert t.slope_bound_deg <= 10.0
    x, y = np.random.default_rng(seed).uniform(-1, 1, (2, 200))
    gx, gy = t.gradient(x, y)
    assert np.degrees(np.arctan(np.hypot(gx, gy))).max() <= 10.0


def test_scene_invariants():
    with pytest.raises(ValueError):
        Particle((0, 0), 0.5, (220, 0.8, 0.6), "PP")
    with pytest.raises(ValueError):
        Scene(Terrain(), (particle_at((5.0, 0.0)),), 0)
    steep = Terrain((0.01,), ((100.0, 0.0),), (0.0,))
    with pytest.raises(ValueError):
        Scene(steep, (), 0)


def test_bump_raises_ground():
    sx, sy = spot_xy()
    t = Terrain().raised(Bump((sx, sy), 0.003, 0.03))
    assert float(t.height(sx, sy)) == pytest.approx(0.003)
    a = sim_with().pose.defocus
    b = sim_with(terrain=t).pose.defocus
    assert a - b == pytest.approx(0.003, abs=1e-4)


def test_nominal_pose_geometry():
    pz = sim_with().pose
    assert pz.defocus == pytest.approx(0.0205, abs=5e-4)
    assert pz.camera_height == pytest.approx(0.1005, abs=5e-4)
    assert JointConfig(*NOMINAL_Q.as_array()) == NOMINAL_Q
