"""Eye-in-hand pinhole projection and pixel-to-ground scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError
from .kinematics import CartesianPoint


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float

    def __sub__(self, other: "PixelCoord") -> "PixelCoord":
        return PixelCoord(self.u - other.u, self.v - other.v)

    def norm(self) -> float:
        return math.hypot(self.u, self.v)


@dataclass(frozen=True)
class CameraIntrinsics:
    omega: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]
    fov_deg: float = 80.0

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        u0, v0 = self.principal_point
        w, h = self.image_size
        if not (0 <= u0 < w and 0 <= v0 < h):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int = 320, height: int = 240, fov_deg: float = 80.0) -> "CameraIntrinsics":
        omega = (width / 2) / math.tan(math.radians(fov_deg) / 2)
        return cls(omega, (width / 2, height / 2), (width, height), fov_deg)


@dataclass(frozen=True)
class ScaleCalibration:
    meters_per_pixel: float
    nominal_zc: float = 0.10
    hand_eye_yaw: float = 0.0

    def __post_init__(self):
        if self.meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be positive")

    @classmethod
    def from_intrinsics(cls, intr: CameraIntrinsics, nominal_zc: float = 0.10, hand_eye_yaw: float = 0.0):
        return cls(nominal_zc / intr.omega, nominal_zc, hand_eye_yaw)


def project(intr: CameraIntrinsics, p_cam) -> PixelCoord:
    x, y, z = p_cam.as_array() if isinstance(p_cam, CartesianPoint) else p_cam
    if z <= 0:
        raise BehindCameraError(f"point at z_c={z} is not in front of the camera")
    s = intr.omega / z
    return PixelCoord(s * x + intr.principal_point[0], s * y + intr.principal_point[1])


def rotation2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def pixel_to_displacement(cal: ScaleCalibration, pixel_error, extra_yaw: float = 0.0) -> np.ndarray:
    """Planar displacement (m) in the rover frame for an image-space error.

    ``extra_yaw`` adds the current base-joint angle, since the end effector
    yaws with gamma0.
    """
    if isinstance(pixel_error, PixelCoord):
        e = np.array([pixel_error.u, pixel_error.v], dtype=float)
    else:
        e = np.asarray(pixel_error, dtype=float)
    return rotation2d(cal.hand_eye_yaw + extra_yaw) @ (cal.meters_per_pixel * e)
