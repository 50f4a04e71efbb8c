"""Deterministic world model for a single rover stop.

Terrain, particles, the arm with actuation noise, a synthetic eye-in-hand
camera and a geometry-driven NIR measurement.  Every random draw comes from
a Generator owned by the episode, so a seeded episode replays bit-for-bit.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics, PixelCoord, ScaleCalibration, project
from .errors import LampOffError, ReferenceContaminatedError
from .kinematics import (
    DEFAULT_LIMITS,
    ArmGeometry,
    JointConfig,
    JointLimits,
    forward_cartesian,
    image_jacobian,
)
from .segmentation import LED, NIR_LAMP, SceneImage
from .spectra import BACKGROUND, SpectralLibrary, Spectrometer, Spectrum, mix_spectra

COLORS = {
    "blue": (220.0, 0.80, 0.60),
    "red": (5.0, 0.85, 0.65),
    "green": (120.0, 0.70, 0.55),
    "dim_yellow": (50.0, 0.30, 0.72),
}
BLUE_HUES = (180.0, 270.0)


# -- world ------------------------------------------------------------------


@dataclass(frozen=True)
class Terrain:
    """Sum of plane waves; gradient magnitude bounded by sum(a * |k|)."""

    amplitudes: tuple[float, ...] = ()
    wavevectors: tuple[tuple[float, float], ...] = ()
    phases: tuple[float, ...] = ()

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h = np.zeros(np.broadcast(x, y).shape)
        for a, (kx, ky), p in zip(self.amplitudes, self.wavevectors, self.phases):
            h += a * np.sin(kx * x + ky * y + p)
        return h if h.ndim else float(h)

    def gradient(self, x, y):
        gx = gy = 0.0
        for a, (kx, ky), p in zip(self.amplitudes, self.wavevectors, self.phases):
            c = a * np.cos(kx * x + ky * y + p)
            gx = gx + c * kx
            gy = gy + c * ky
        return gx, gy

    @property
    def slope_bound_deg(self) -> float:
        s = sum(a * math.hypot(*k) for a, k in zip(self.amplitudes, self.wavevectors))
        return math.degrees(math.atan(s))

    def raised(self, bump: "Bump") -> "BumpyTerrain":
        return BumpyTerrain(self, bump)

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        max_slope_deg: float = 10.0,
        max_amplitude: float = 0.004,
        n: int = 6,
    ) -> "Terrain":
        wavelengths = rng.uniform(0.08, 0.8, n)
        angles = rng.uniform(0, 2 * math.pi, n)
        ks = 2 * math.pi / wavelengths
        raw = wavelengths.copy()
        slope_sum = float(np.sum(raw * ks))
        scale = min(math.tan(math.radians(max_slope_deg)) * 0.9 / slope_sum, max_amplitude / raw.sum())
        amps = raw * scale
        return cls(
            tuple(float(a) for a in amps),
            tuple((float(k * math.cos(t)), float(k * math.sin(t))) for k, t in zip(ks, angles)),
            tuple(float(p) for p in rng.uniform(0, 2 * math.pi, n)),
        )


@dataclass(frozen=True)
class Bump:
    """Smooth raised cap of given height and radius (m)."""

    center: tuple[float, float]
    height: float
    radius: float

    def __call__(self, x, y):
        d2 = (np.asarray(x) - self.center[0]) ** 2 + (np.asarray(y) - self.center[1]) ** 2
        return self.height * np.exp(-d2 / self.radius**2)


@dataclass(frozen=True)
class BumpyTerrain:
    base: Terrain
    bump: Bump

    def height(self, x, y):
        h = self.base.height(x, y) + self.bump(x, y)
        return h if np.ndim(h) else float(h)

    @property
    def slope_bound_deg(self) -> float:
        extra = self.bump.height * math.sqrt(2 / math.e) / self.bump.radius
        return math.degrees(math.atan(math.tan(math.radians(self.base.slope_bound_deg)) + extra))


@dataclass(frozen=True)
class Particle:
    position: tuple[float, float]
    size_mm: float
    color: tuple[float, float, float]
    material: str
    pid: int = 0

    def __post_init__(self):
        if self.size_mm < 1.0:
            raise ValueError("particles must be at least 1 mm")

    @property
    def radius(self) -> float:
        return self.size_mm * 5e-4


@dataclass(frozen=True)
class Scene:
    terrain: Terrain | BumpyTerrain
    particles: tuple[Particle, ...]
    seed: int
    bounds: tuple[float, float, float, float] = (-1.0, 3.0, -1.0, 1.0)  # x0, x1, y0, y1
    max_slope_deg: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "particles", tuple(self.particles))
        if self.terrain.slope_bound_deg > self.max_slope_deg + 1e-9:
            raise ValueError(f"terrain slope bound {self.terrain.slope_bound_deg:.2f} deg exceeds {self.max_slope_deg}")
        x0, x1, y0, y1 = self.bounds
        for p in self.particles:
            if not (x0 <= p.position[0] <= x1 and y0 <= p.position[1] <= y1):
                raise ValueError(f"particle {p.pid} outside workspace bounds")

    def particles_near(self, xy, radius: float) -> list[Particle]:
        return [
            p for p in self.particles
            if math.hypot(p.position[0] - xy[0], p.position[1] - xy[1]) <= radius + p.radius
        ]


# -- rig ----------------------------------------------------------------------


@dataclass(frozen=True)
class NirGeometry:
    """Emitter looks straight down; the receiver sits 45 deg off axis.

    Spot radius grows linearly with |defocus|; at defocus d the receiver's
    footprint centre is displaced by d * tan(receiver_angle) along its azimuth.
    """

    focus_distance: float = 0.010
    spot_radius0: float = 0.00075
    spread: float = 0.25
    receiver_angle_deg: float = 45.0
    receiver_azimuth: float = math.pi / 2  # in the effector frame
    defocus_scale: float = 0.0004

    def spot_radius(self, defocus: float) -> float:
        return self.spot_radius0 + self.spread * abs(defocus)

    def signal_gain(self, defocus: float) -> float:
        """Fraction of the in-focus signal collected; exp(-(d / 0.4 mm)^2)."""
        return math.exp(-((defocus / self.defocus_scale) ** 2))


@dataclass(frozen=True)
class Rig:
    """Fixed mechanical layout of rover, arm mount and end effector."""

    base_offset: tuple[float, float, float] = (0.0, 0.0, 0.19)
    focus_drop: float = 0.12  # last joint to NIR focal point, along the vertical effector axis
    cam_above_focus: float = 0.08
    cam_offset: float = 0.008  # camera centre ahead of the emitter axis, effector frame
    nir: NirGeometry = NirGeometry()


@dataclass(frozen=True)
class RoverPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0


@dataclass(frozen=True)
class ActuationModel:
    sigma_act: float = 2e-4  # rad, per joint per step
    flex_bias: float = 1e-3  # rad, wrist-sum error that tilts the effector
    settle_ticks: int = 120  # at 60 Hz


@dataclass(frozen=True)
class EffectorState:
    q: JointConfig
    rover: RoverPose = RoverPose()
    lamp: bool = False
    settled: bool = True
    limit_hit: bool = False
    ticks: int = 0


@dataclass(frozen=True)
class Pose:
    """World-frame geometry derived from an EffectorState."""

    wrist: np.ndarray
    focus: np.ndarray
    camera: np.ndarray
    effector_yaw: float
    spot_center: np.ndarray
    defocus: float
    camera_height: float


def rover_ground(scene: Scene, rover: RoverPose) -> float:
    return float(scene.terrain.height(rover.x, rover.y))


def arm_origin(scene: Scene, rig: Rig, rover: RoverPose) -> np.ndarray:
    c, s = math.cos(rover.yaw), math.sin(rover.yaw)
    bx, by, bz = rig.base_offset
    return np.array([rover.x + c * bx - s * by, rover.y + s * bx + c * by, rover_ground(scene, rover) + bz])


def pose(scene: Scene, rig: Rig, geom: ArmGeometry, state: EffectorState, flex: float = 0.0) -> Pose:
    rv = state.rover
    c, s = math.cos(rv.yaw), math.sin(rv.yaw)
    p = forward_cartesian(geom, state.q).as_array()
    wrist = arm_origin(scene, rig, rv) + np.array([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
    yaw = rv.yaw + state.q.gamma0
    radial = np.array([math.cos(yaw), math.sin(yaw)])
    # Flex tilts the effector axis outward in the radial plane.
    down = np.array([math.sin(flex) * radial[0], math.sin(flex) * radial[1], -math.cos(flex)])
    focus = wrist + rig.focus_drop * down
    camera = wrist + (rig.focus_drop - rig.cam_above_focus) * down
    camera[:2] += rig.cam_offset * radial
    ground = scene.terrain.height(focus[0], focus[1])
    t = (ground - focus[2]) / down[2]
    spot = focus[:2] + t * down[:2]
    defocus = float(focus[2] - scene.terrain.height(spot[0], spot[1]))
    cam_h = float(camera[2] - scene.terrain.height(camera[0], camera[1]))
    return Pose(wrist, focus, camera, yaw, spot, defocus, cam_h)


def focus_point(scene, rig, geom, state, flex=0.0) -> np.ndarray:
    return pose(scene, rig, geom, state, flex).focus


# -- arm ----------------------------------------------------------------------


def step_arm(
    scene: Scene,
    state: EffectorState,
    deltas,
    rng: np.random.Generator,
    actuation: ActuationModel = ActuationModel(),
    limits: JointLimits = DEFAULT_LIMITS,
) -> EffectorState:
    """Apply joint increments plus Gaussian actuation noise, then settle."""
    d = np.asarray(deltas, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("joint deltas must be finite")
    noise = rng.normal(0.0, actuation.sigma_act, 3) if actuation.sigma_act > 0 else np.zeros(3)
    q, hit = limits.clamp(state.q + (d + noise))
    return replace(state, q=q, settled=True, limit_hit=hit, ticks=state.ticks + actuation.settle_ticks)


def focus_scatter_prediction(geom: ArmGeometry, q: JointConfig, sigma: float) -> np.ndarray:
    """Linearized per-axis std of the focus point under iid joint noise."""
    J = image_jacobian(geom, q)
    return np.sqrt(np.diag(sigma**2 * J @ J.T))


# -- camera rendering -------------------------------------------------------


def _hash3(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Three stable uniforms in [0, 1) per integer cell, from one 64-bit mix."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
    h ^= np.uint64((seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(29)
    mask = np.uint64((1 << 21) - 1)
    out = np.empty(ix.shape + (3,))
    for i in range(3):
        out[..., i] = ((h >> np.uint64(21 * i)) & mask).astype(np.float64) / float(1 << 21)
    return out


SAND_CELL = 0.0005


def sand_texture(scene: Scene, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    ix = np.floor(gx / SAND_CELL).astype(np.int64)
    iy = np.floor(gy / SAND_CELL).astype(np.int64)
    hsv = _hash3(ix, iy, scene.seed)
    hsv *= (15.0, 0.17, 0.25)
    hsv += (40.0, 0.15, 0.55)
    return hsv


@lru_cache(maxsize=4)
def _pixel_grid(w: int, h: int):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    v.setflags(write=False)
    u.setflags(write=False)
    return v, u


def pixel_ground(pz: Pose, intr: CameraIntrinsics, cal: ScaleCalibration, u, v):
    """Ground xy seen at pixel (u, v), flat patch at the height under the camera."""
    k = pz.camera_height / intr.omega
    a = pz.effector_yaw + cal.hand_eye_yaw
    c, s = math.cos(a), math.sin(a)
    du = (np.asarray(u, dtype=float) - intr.principal_point[0]) * k
    dv = (np.asarray(v, dtype=float) - intr.principal_point[1]) * k
    return pz.camera[0] + c * du - s * dv, pz.camera[1] + s * du + c * dv


def ground_pixel(pz: Pose, intr: CameraIntrinsics, cal: ScaleCalibration, xy) -> PixelCoord:
    """Inverse of pixel_ground, through the camera model."""
    a = pz.effector_yaw + cal.hand_eye_yaw
    c, s = math.cos(a), math.sin(a)
    dx, dy = xy[0] - pz.camera[0], xy[1] - pz.camera[1]
    return project(intr, (c * dx + s * dy, -s * dx + c * dy, pz.camera_height))


def render(
    scene: Scene,
    pz: Pose,
    intr: CameraIntrinsics,
    cal: ScaleCalibration,
    illumination: str = LED,
    spot_radius: float | None = None,
) -> SceneImage:
    """Top-down render of sand texture and particles.

    Under the NIR lamp the scene dims, the spot reads near-white with a red
    cast, and blue-hued objects inside the spot go almost black.
    """
    v, u = _pixel_grid(*intr.image_size)
    gx, gy = pixel_ground(pz, intr, cal, u, v)
    hsv = sand_texture(scene, gx, gy)
    x0, x1, y0, y1 = gx.min(), gx.max(), gy.min(), gy.max()
    for p in scene.particles:
        px, py = p.position
        r = p.radius
        if px + r < x0 or px - r > x1 or py + r < y0 or py - r > y1:
            continue
        inside = (gx - px) ** 2 + (gy - py) ** 2 <= r * r
        hsv[inside] = p.color
    if illumination == NIR_LAMP:
        hsv[..., 2] *= 0.45
        rad = spot_radius if spot_radius is not None else 0.0
        lit = (gx - pz.spot_center[0]) ** 2 + (gy - pz.spot_center[1]) ** 2 <= rad * rad
        blue = (hsv[..., 0] >= BLUE_HUES[0]) & (hsv[..., 0] <= BLUE_HUES[1])
        sat = hsv[..., 1] >= 0.45
        dark = lit & blue & sat
        warm = lit & ~dark
        hue = hsv[..., 0]
        # shift toward red (hue 0/360) by 15 deg
        hue[warm] = np.where(hue[warm] <= 180.0, np.maximum(hue[warm] - 15.0, 0.0), np.minimum(hue[warm] + 15.0, 359.999))
        hsv[warm, 1] = np.minimum(hsv[warm, 1], np.where(sat[warm], hsv[warm, 1], 0.3))
        hsv[warm, 2] = 0.97
        hsv[dark] = (hsv[dark][:, 0:1] * 0 + np.array([230.0, 0.1, 0.05]))
    return SceneImage(hsv, illumination)


# -- NIR measurement ----------------------------------------------------------

RASTER = 1e-4


@dataclass(frozen=True)
class NirSample:
    sample: Spectrum
    dark: Spectrum
    weights: dict
    snr_effective: float
    defocus: float


def _footprint(pz: Pose, nir: NirGeometry):
    """Raster points (0.1 mm) lit by the emitter and seen by the receiver."""
    r = nir.spot_radius(pz.defocus)
    shift = pz.defocus * math.tan(math.radians(nir.receiver_angle_deg))
    az = pz.effector_yaw + nir.receiver_azimuth
    rc = pz.spot_center + shift * np.array([math.cos(az), math.sin(az)])
    n = int(math.ceil(r / RASTER))
    off = np.arange(-n, n + 1) * RASTER
    ox, oy = np.meshgrid(off, off)
    keep = ox**2 + oy**2 <= r * r
    px = pz.spot_center[0] + ox[keep]
    py = pz.spot_center[1] + oy[keep]
    keep2 = (px - rc[0]) ** 2 + (py - rc[1]) ** 2 <= r * r
    return px[keep2], py[keep2], r


def footprint_weights(scene: Scene, pz: Pose, nir: NirGeometry) -> dict:
    """Area fraction of each material in the collected footprint; sand fills the rest."""
    px, py, r = _footprint(pz, nir)
    if px.size == 0:
        return {BACKGROUND: 1.0}
    owner = np.full(px.size, -1)
    near = scene.particles_near(pz.spot_center, r + abs(pz.defocus) * 2)
    for i, p in enumerate(near):
        owner[(px - p.position[0]) ** 2 + (py - p.position[1]) ** 2 <= p.radius**2] = i
    weights: dict = {}
    for i, p in enumerate(near):
        cnt = int(np.count_nonzero(owner == i))
        if cnt:
            weights[p.material] = weights.get(p.material, 0) + cnt / px.size
    sand = 1.0 - sum(weights.values())
    if sand > 0:
        weights[BACKGROUND] = sand
    return dict(sorted(weights.items()))


def sample_nir(
    scene: Scene,
    pz: Pose,
    lamp: bool,
    lib: SpectralLibrary,
    spectrometer: Spectrometer,
    nir: NirGeometry,
    rng: np.random.Generator,
) -> NirSample:
    """Raw sample counts for the current pose.

    Effective SNR is snr_max * g(defocus) with g the Gaussian collection
    gain: the signal scales by g over a fixed read-noise floor.
    """
    if not lamp:
        raise LampOffError("NIR lamp is off")
    weights = footprint_weights(scene, pz, nir)
    total = sum(weights.values())
    mix = mix_spectra([(lib.reflectance(m), w / total) for m, w in weights.items()])
    g = nir.signal_gain(pz.defocus)
    sample = spectrometer.counts(mix, g, rng)
    dark = spectrometer.dark(lib.grid, rng)
    return NirSample(sample, dark, weights, spectrometer.snr_max * g, pz.defocus)


def acquire_reference(
    scene: Scene,
    pz: Pose,
    lib: SpectralLibrary,
    spectrometer: Spectrometer,
    nir: NirGeometry,
    rng: np.random.Generator,
) -> tuple[Spectrum, Spectrum]:
    """(reference, dark) on clean sand at the current pose."""
    px, py, r = _footprint(pz, nir)
    for p in scene.particles_near(pz.spot_center, r + abs(pz.defocus) * 2):
        if np.any((px - p.position[0]) ** 2 + (py - p.position[1]) ** 2 <= p.radius**2):
            raise ReferenceContaminatedError(f"particle {p.pid} inside the reference footprint")
    g = nir.signal_gain(pz.defocus)
    ref = spectrometer.counts(lib.reflectance(BACKGROUND), g, rng, role="reference")
    dark = spectrometer.dark(lib.grid, rng)
    return ref, dark


# -- episode ------------------------------------------------------------------


@dataclass
class Simulator:
    """Single-owner episode: scene, rig, sensors and the evolving effector state."""

    scene: Scene
    state: EffectorState
    geom: ArmGeometry = ArmGeometry()
    rig: Rig = Rig()
    intr: CameraIntrinsics = field(default_factory=CameraIntrinsics.from_fov)
    cal: ScaleCalibration | None = None
    lib: SpectralLibrary | None = None
    spectrometer: Spectrometer | None = None
    actuation: ActuationModel = ActuationModel()
    limits: JointLimits = DEFAULT_LIMITS
    rng: np.random.Generator | None = None
    seed: int = 0

    def __post_init__(self):
        if self.cal is None:
            self.cal = ScaleCalibration.from_intrinsics(self.intr, self.rig.cam_above_focus + 0.02)
        if self.lib is None:
            from .spectra import default_library

            self.lib = default_library()
        if self.spectrometer is None:
            self.spectrometer = Spectrometer.for_library(self.lib)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def pose(self) -> Pose:
        return pose(self.scene, self.rig, self.geom, self.state, self.actuation.flex_bias)

    def step(self, deltas) -> EffectorState:
        self.state = step_arm(self.scene, self.state, deltas, self.rng, self.actuation, self.limits)
        return self.state

    def set_lamp(self, on: bool):
        self.state = replace(self.state, lamp=on)

    def render(self, illumination: str | None = None) -> SceneImage:
        ill = illumination or (NIR_LAMP if self.state.lamp else LED)
        pz = self.pose
        r = self.rig.nir.spot_radius(pz.defocus) if ill == NIR_LAMP else None
        return render(self.scene, pz, self.intr, self.cal, ill, r)

    def sample(self) -> NirSample:
        return sample_nir(self.scene, self.pose, self.state.lamp, self.lib, self.spectrometer, self.rig.nir, self.rng)

    def reference(self) -> tuple[Spectrum, Spectrum]:
        return acquire_reference(self.scene, self.pose, self.lib, self.spectrometer, self.rig.nir, self.rng)

    def target_pixel(self) -> PixelCoord:
        """Calibrated image position of the emitter axis on nominal ground."""
        return calibrated_target_pixel(self.rig, self.intr, self.cal)

    def focused_spot_px(self) -> float:
        """Spot diameter in pixels when in focus, from the rig design."""
        return 2 * self.rig.nir.spot_radius0 * self.intr.omega / self.rig.cam_above_focus


def calibrated_target_pixel(rig: Rig, intr: CameraIntrinsics, cal: ScaleCalibration) -> PixelCoord:
    a = -cal.hand_eye_yaw
    c, s = math.cos(a), math.sin(a)
    dx = -rig.cam_offset
    return project(intr, (c * dx, s * dx, cal.nominal_zc))
