import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beachbot.camera import CameraIntrinsics, PixelCoord, ScaleCalibration, pixel_to_displacement, project
from beachbot.errors import BehindCameraError

INTR = CameraIntrinsics(1000.0, (640.0, 360.0), (1280, 720))


def test_axis_point_hits_principal_point():
    p = project(INTR, (0.0, 0.0, 0.37))
    assert (p.u, p.v) == (640.0, 360.0)


def test_direct_substitution():
    p = project(INTR, (0.01, 0.0, 0.1))
    assert p.u == pytest.approx(740.0, abs=1e-12)
    assert p.v == 360.0


def test_behind_camera():
    for z in (0.0, -0.1):
        with pytest.raises(BehindCameraError):
            project(INTR, (0.0, 0.0, z))


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, (1, 1), (4, 4))
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, (5, 1), (4, 4))


def test_from_fov_omega():
    intr = CameraIntrinsics.from_fov(320, 240, 80.0)
    assert intr.omega == pytest.approx(160.0 / math.tan(math.radians(40.0)), rel=1e-15)
    assert intr.principal_point == (160.0, 120.0)


def test_displacement_examples():
    cal = ScaleCalibration(1e-4)
    assert np.all(pixel_to_displacement(cal, PixelCoord(0, 0)) == 0)
    assert pixel_to_displacement(cal, PixelCoord(1, 0)) == pytest.approx([1e-4, 0.0], abs=1e-18)


def test_hand_eye_quarter_turn():
    cal = ScaleCalibration(1e-4, hand_eye_yaw=math.pi / 2)
    d = pixel_to_displacement(cal, PixelCoord(10, 0))
    assert d == pytest.approx([0.0, 1e-3], abs=1e-15)


@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_round_trip_on_ground_plane(x, y):
    zc = 0.1
    cal = ScaleCalibration.from_intrinsics(INTR, zc)
    p = project(INTR, (x, y, zc))
    pp = PixelCoord(*INTR.principal_point)
    assert pixel_to_displacement(cal, p - pp) == pytest.approx([x, y], abs=1e-9)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 2), st.floats(0.01, 100))
def test_projection_degree_zero(x, y, z, k):
    a = project(INTR, (x, y, z))
    b = project(INTR, (k * x, k * y, k * z))
    assert b.u == pytest.approx(a.u, rel=1e-9, abs=1e-9)
    assert b.v == pytest.approx(a.v, rel=1e-9, abs=1e-9)
