"""Closed-loop positioning of the NIR focus over a candidate particle.

Three phases run in order: planar visual servoing on the camera image,
descent on spot size and spectrometer SNR, and a square-spiral search that
keeps probing until the spectrum is valid and clearly not bare sand.  A sand
reference is taken next to the particle between descent and search.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .camera import PixelCoord, pixel_to_displacement
from .errors import (
    CollisionRiskError,
    ReferenceContaminatedError,
    TargetLostError,
    TargetUnreachableError,
)
from .kinematics import NOMINAL_Q, ArmGeometry, JointConfig, forward_cartesian, solve_increment, solve_position
from .scene import (
    COLORS,
    ActuationModel,
    EffectorState,
    Particle,
    Scene,
    Simulator,
    Terrain,
    ground_pixel,
)
from .segmentation import LED, NIR_LAMP, SegmentationParams, detect_candidates, detect_nir_spot
from .spectra import CLASSES, PLASTICS, Assessment, Spectrum, assess, band_energy, fit_coverage

PHASES = ("XY", "DESCEND", "REFERENCE", "TERMINAL")
LOG10E = 1.0 / math.log(10.0)


@dataclass(frozen=True)
class ServoParams:
    lam: float = 0.2
    xy_tol: float = 1e-3
    xy_converge: float = 3e-4  # planar phase hands over below this (m)
    snr_threshold: float = 9000.0  # 0.6 * snr_max
    max_iters: int = 80
    spiral_step: float = 5e-4
    max_probes: int = 25
    coarse_factor: float = 2.0
    coarse_step: float = 2e-3
    fine_step: float = 2.5e-4
    max_descent: float = 0.028
    reference_offset: float = 4.5e-3
    coverage_min: float = 0.9
    energy_factor: float = 3.0
    track_gate_px: float = 12.0

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        for name in ("xy_tol", "xy_converge", "spiral_step", "coarse_step", "fine_step", "max_descent", "snr_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1 or self.max_probes < 1:
            raise ValueError("iteration limits must be at least 1")
        if self.coarse_factor <= 1:
            raise ValueError("coarse_factor must exceed 1")


@dataclass(frozen=True)
class TraceRow:
    iter: int
    phase: str
    ex_px: float
    ey_px: float
    d0: float
    d1: float
    d2: float
    z_mm: float
    snr: float
    valid: bool


TRACE_HEADER = ("iter", "phase", "ex_px", "ey_px", "dγ0", "dγ1", "dγ2", "z_mm", "snr", "valid")


@dataclass
class ServoTrace:
    rows: list = field(default_factory=list)

    def add(self, phase, err=(math.nan, math.nan), deltas=(0.0, 0.0, 0.0), z_mm=math.nan, snr=math.nan, valid=False):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if self.rows and PHASES.index(phase) < PHASES.index(self.rows[-1].phase):
            raise ValueError(f"phase {phase} after {self.rows[-1].phase}")
        self.rows.append(TraceRow(len(self.rows), phase, float(err[0]), float(err[1]), *map(float, deltas), float(z_mm), float(snr), bool(valid)))

    def phases(self) -> list[str]:
        return [r.phase for r in self.rows]

    def to_rows(self) -> list[list]:
        return [[r.iter, r.phase, r.ex_px, r.ey_px, r.d0, r.d1, r.d2, r.z_mm, r.snr, int(r.valid)] for r in self.rows]

    def write_csv(self, path_or_file, episode: str | None = None):
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
        try:
            w = csv.writer(fh)
            w.writerow((("episode",) if episode is not None else ()) + TRACE_HEADER)
            for row in self.to_rows():
                w.writerow(([episode] if episode is not None else []) + [f"{x:.9g}" if isinstance(x, float) else x for x in row])
        finally:
            if own:
                fh.close()


class Mailbox:
    """Latest-value slot between the detection stream and the planner.

    A put overwrites whatever the planner has not yet taken; take returns
    only frames newer than the last one taken.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._item = None
        self._seq = 0
        self._taken = 0
        self.dropped = 0

    def put(self, item):
        with self._lock:
            if self._seq > self._taken:
                self.dropped += 1
            self._seq += 1
            self._item = item

    def take(self):
        """(sequence number, item) of the freshest unseen frame, or None."""
        with self._lock:
            if self._seq == self._taken:
                return None
            self._taken = self._seq
            return self._seq, self._item


# -- phase steps ------------------------------------------------------------


def servo_xy_step(geom: ArmGeometry, q: JointConfig, cal, target: PixelCoord, focus: PixelCoord, params: ServoParams) -> np.ndarray:
    """Joint deltas closing a fraction lam of the target-to-focus pixel error."""
    e = target - focus
    if e.u == 0 and e.v == 0:
        return np.zeros(3)
    d = pixel_to_displacement(cal, e, q.gamma0)
    return solve_increment(geom, q, (d[0], d[1], 0.0), params.lam)


@dataclass
class DescentProgress:
    descended: float = 0.0
    last_snr: float | None = None
    peak_seen: bool = False
    steps: int = 0


@dataclass(frozen=True)
class DescentDecision:
    deltas: np.ndarray
    dz: float
    done: bool
    mode: str  # coarse, fine, hold, back


def descend_step(
    geom: ArmGeometry,
    q: JointConfig,
    spot_diameter_px: float | None,
    focused_diameter_px: float,
    snr: float,
    progress: DescentProgress,
    params: ServoParams,
    min_valid_snr: float = 100.0,
) -> DescentDecision:
    """One descent decision from the current spot size and SNR.

    Coarse steps while the spot is clearly out of focus, fine steps after.
    Stops when SNR reaches the threshold; if SNR falls after having been
    usable, the focus was passed, so it steps back up once and stops.
    """
    if snr >= params.snr_threshold:
        return DescentDecision(np.zeros(3), 0.0, True, "hold")
    if progress.last_snr is not None and progress.peak_seen and snr < progress.last_snr:
        dz = params.fine_step
        progress.descended -= dz
        return DescentDecision(_vertical(geom, q, dz), dz, True, "back")
    if snr >= min_valid_snr:
        progress.peak_seen = True
    coarse = spot_diameter_px is not None and spot_diameter_px > params.coarse_factor * focused_diameter_px
    dz = params.coarse_step if coarse else params.fine_step
    if progress.descended + dz > params.max_descent:
        raise CollisionRiskError(
            f"descent of {1e3 * (progress.descended + dz):.2f} mm exceeds the {1e3 * params.max_descent:.1f} mm margin"
        )
    progress.descended += dz
    progress.last_snr = snr
    progress.steps += 1
    return DescentDecision(_vertical(geom, q, -dz), -dz, False, "coarse" if coarse else "fine")


def _vertical(geom: ArmGeometry, q: JointConfig, dz: float) -> np.ndarray:
    return move_deltas(geom, q, forward_cartesian(geom, q).as_array() + (0.0, 0.0, dz))


def spiral_offsets(n: int) -> Iterator[tuple[int, int]]:
    """Outward square spiral on the integer lattice starting at the origin."""
    x = y = 0
    yield 0, 0
    count = 1
    leg = 1
    dirs = ((1, 0), (0, 1), (-1, 0), (0, -1))
    k = 0
    while count < n:
        for _ in range(2):
            dx, dy = dirs[k % 4]
            for _ in range(leg):
                if count >= n:
                    return
                x, y = x + dx, y + dy
                yield x, y
                count += 1
            k += 1
        leg += 1


def noise_energy(snr: float) -> float:
    """Absorbance RMS expected from noise alone at a given SNR."""
    return LOG10E * math.sqrt(2.0) / max(snr, 1e-12)


def accept_probe(a: Assessment, lib, params: ServoParams) -> tuple[bool, str | None, float]:
    """Valid, dominated by one non-sand material, and above the sand noise band."""
    if not a.valid:
        return False, None, 0.0
    material, coverage, _ = fit_coverage(a.absorbance, lib, CLASSES)
    ok = coverage >= params.coverage_min and band_energy(a.absorbance) > params.energy_factor * noise_energy(a.snr)
    return ok, material, coverage


# -- episode ------------------------------------------------------------------


@dataclass
class EpisodeResult:
    status: str  # sampled, lost, unreachable, collision, reference_failed
    trace: ServoTrace
    absorbance: Spectrum | None = None
    assessment: Assessment | None = None
    probes: int = 0
    material_hint: str | None = None
    coverage: float = 0.0
    xy_error_before: float = math.nan
    xy_error_after: float = math.nan


def _move(sim: Simulator, deltas) -> None:
    sim.step(deltas)


def _wrist(sim: Simulator) -> np.ndarray:
    return forward_cartesian(sim.geom, sim.state.q).as_array()


def _goto(sim: Simulator, goal) -> np.ndarray:
    """Joint deltas reaching a wrist position exactly, from the current joint reading."""
    return move_deltas(sim.geom, sim.state.q, goal)


def move_deltas(geom: ArmGeometry, q: JointConfig, goal) -> np.ndarray:
    # Large moves need the full inverse: a single Jacobian step of 4 mm
    # leaves about 1 mm of height error in extended poses.
    return solve_position(geom, np.asarray(goal, dtype=float), q, tol=1e-10).as_array() - q.as_array()


def _measure(sim: Simulator, reference=None):
    s = sim.sample()
    snr = sim.spectrometer.snr_estimate(s.sample, s.dark)
    a = assess(s.sample, s.dark, reference, sim.spectrometer) if reference is not None else None
    return s, snr, a


def _z_mm(sim: Simulator) -> float:
    return 1e3 * sim.pose.defocus


def run_xy(sim: Simulator, target: PixelCoord, params: ServoParams, trace: ServoTrace, seg: SegmentationParams, mailbox: Mailbox | None = None):
    mailbox = mailbox or Mailbox()
    focus = sim.target_pixel()
    sim.set_lamp(False)
    for _ in range(params.max_iters):
        mailbox.put(detect_candidates(sim.render(LED), seg))
        _, dets = mailbox.take()
        if not dets:
            raise TargetLostError("no candidates in view")
        best = min(dets, key=lambda d: (d.centroid - target).norm())
        if (best.centroid - target).norm() > params.track_gate_px:
            raise TargetLostError(f"nearest candidate {(best.centroid - target).norm():.1f} px from the track")
        target = best.centroid
        e = target - focus
        if e.norm() * sim.cal.meters_per_pixel <= params.xy_converge:
            trace.add("XY", (e.u, e.v), z_mm=_z_mm(sim))
            return target
        d = servo_xy_step(sim.geom, sim.state.q, sim.cal, target, focus, params)
        trace.add("XY", (e.u, e.v), d, _z_mm(sim))
        _move(sim, d)
        # The target image moves toward the focus pixel by about lam * e.
        target = PixelCoord(target.u - params.lam * e.u, target.v - params.lam * e.v)
    raise TargetLostError(f"planar servo did not converge in {params.max_iters} iterations")


def run_descent(sim: Simulator, params: ServoParams, trace: ServoTrace, seg: SegmentationParams):
    sim.set_lamp(True)
    progress = DescentProgress()
    focused = sim.focused_spot_px()
    coarse = True
    for _ in range(params.max_iters):
        # Once fine stepping starts the spot only shrinks, so the camera is no longer needed.
        spot = detect_nir_spot(sim.render(NIR_LAMP), seg) if coarse else None
        _, snr, _ = _measure(sim)
        dec = descend_step(
            sim.geom, sim.state.q, spot.spot_diameter if spot else None, focused, snr, progress, params,
            sim.spectrometer.min_valid_snr,
        )
        trace.add("DESCEND", deltas=dec.deltas, z_mm=_z_mm(sim), snr=snr, valid=snr >= sim.spectrometer.min_valid_snr)
        coarse = dec.mode == "coarse"
        if np.any(dec.deltas):
            _move(sim, dec.deltas)
        if dec.done:
            return progress
    raise CollisionRiskError(f"descent did not settle in {params.max_iters} iterations")


def _reference_directions(sim: Simulator, params: ServoParams, seg: SegmentationParams):
    """Offsets (rover frame) ordered by clearance from visible candidates."""
    yaw = sim.state.q.gamma0
    c, s = math.cos(yaw), math.sin(yaw)
    dirs = [(c, s), (-s, c), (s, -c), (-c, -s)]
    dets = detect_candidates(sim.render(LED), seg)
    pz = sim.pose
    px_per_m = sim.intr.omega / pz.camera_height
    focus = sim.target_pixel()

    def clearance(d):
        a = yaw + sim.cal.hand_eye_yaw
        # rover-frame offset back into image axes
        du = (math.cos(a) * d[0] + math.sin(a) * d[1]) * params.reference_offset * px_per_m
        dv = (-math.sin(a) * d[0] + math.cos(a) * d[1]) * params.reference_offset * px_per_m
        spot = PixelCoord(focus.u + du, focus.v + dv)
        gaps = [(det.centroid - spot).norm() - math.sqrt(det.area / math.pi) for det in dets]
        return min(gaps, default=math.inf)

    ranked = sorted(range(4), key=lambda i: (-min(clearance(dirs[i]), 1e6), i))
    return [(dirs[i][0] * params.reference_offset, dirs[i][1] * params.reference_offset) for i in ranked]


def run_reference(sim: Simulator, params: ServoParams, trace: ServoTrace, seg: SegmentationParams):
    """Step aside onto clean sand, take reference and dark, step back."""
    offsets = _reference_directions(sim, params, seg)
    sim.set_lamp(True)
    home = _wrist(sim)
    for dx, dy in offsets:
        d = _goto(sim, home + (dx, dy, 0.0))
        trace.add("REFERENCE", deltas=d, z_mm=_z_mm(sim))
        _move(sim, d)
        try:
            ref, dark = sim.reference()
        except ReferenceContaminatedError:
            ref = None
        back = _goto(sim, home)
        snr = sim.spectrometer.snr_estimate(ref, dark) if ref is not None else math.nan
        trace.add("REFERENCE", deltas=back, z_mm=_z_mm(sim), snr=snr, valid=ref is not None)
        _move(sim, back)
        if ref is not None:
            return ref
    raise ReferenceContaminatedError("every candidate reference spot overlaps a particle")


def run_terminal(sim: Simulator, reference: Spectrum, params: ServoParams, trace: ServoTrace):
    home = _wrist(sim)
    yaw = sim.state.q.gamma0
    c, s = math.cos(yaw), math.sin(yaw)
    probes = 0
    for ix, iy in spiral_offsets(params.max_probes):
        if (ix, iy) != (0, 0):
            # spiral axes follow the effector so the pattern is the same in every view
            ox, oy = ix * params.spiral_step, iy * params.spiral_step
            d = _goto(sim, home + (c * ox - s * oy, s * ox + c * oy, 0.0))
            _move(sim, d)
        else:
            d = np.zeros(3)
        _, snr, a = _measure(sim, reference)
        probes += 1
        ok, material, coverage = accept_probe(a, sim.lib, params)
        trace.add("TERMINAL", deltas=d, z_mm=_z_mm(sim), snr=snr, valid=a.valid)
        if ok:
            return a, probes, material, coverage
    raise TargetUnreachableError(probes)


def run_episode(
    sim: Simulator,
    target: PixelCoord,
    params: ServoParams = ServoParams(),
    seg: SegmentationParams | None = None,
    truth: Particle | None = None,
) -> EpisodeResult:
    """Full servo sequence on the candidate currently seen at ``target``.

    ``truth`` is only used to score planar error before and after the
    terminal search; the controller never reads it.
    """
    seg = seg or SegmentationParams.for_camera(sim.cal.meters_per_pixel)
    trace = ServoTrace()

    def err():
        if truth is None:
            return math.nan
        c = sim.pose.spot_center
        return math.hypot(c[0] - truth.position[0], c[1] - truth.position[1])

    try:
        run_xy(sim, target, params, trace, seg)
        run_descent(sim, params, trace, seg)
    except TargetLostError:
        return EpisodeResult("lost", trace, xy_error_before=err(), xy_error_after=err())
    except CollisionRiskError:
        return EpisodeResult("collision", trace, xy_error_before=err(), xy_error_after=err())
    before = err()
    try:
        reference = run_reference(sim, params, trace, seg)
    except ReferenceContaminatedError:
        return EpisodeResult("reference_failed", trace, xy_error_before=before, xy_error_after=err())
    try:
        a, probes, material, coverage = run_terminal(sim, reference, params, trace)
    except TargetUnreachableError as exc:
        return EpisodeResult("unreachable", trace, probes=exc.probes, xy_error_before=before, xy_error_after=err())
    return EpisodeResult("sampled", trace, a.absorbance, a, probes, material, coverage, before, err())


# -- Monte-Carlo trials -------------------------------------------------------


@dataclass
class Trial:
    sim: Simulator
    particle: Particle
    target: PixelCoord
    offset: float


def make_trial(seed: int, max_offset: float = 0.03, size_mm: float = 3.0, actuation: ActuationModel = ActuationModel()) -> Trial:
    """One particle on random terrain, placed up to ``max_offset`` from the focus."""
    rng = np.random.default_rng(seed)
    terrain = Terrain.random(rng)
    r = max_offset * math.sqrt(rng.uniform())
    ang = rng.uniform(0, 2 * math.pi)
    probe = Simulator(Scene(terrain, (), seed=seed), EffectorState(NOMINAL_Q), actuation=actuation)
    c = probe.pose.spot_center
    pos = (float(c[0] + r * math.cos(ang)), float(c[1] + r * math.sin(ang)))
    color = COLORS[("blue", "red", "green")[int(rng.integers(3))]]
    material = PLASTICS[int(rng.integers(len(PLASTICS)))]
    particle = Particle(pos, size_mm, color, material, pid=0)
    sim = Simulator(
        Scene(terrain, (particle,), seed=seed),
        EffectorState(NOMINAL_Q),
        actuation=actuation,
        rng=np.random.default_rng([seed, 1]),
    )
    target = ground_pixel(sim.pose, sim.intr, sim.cal, pos)
    return Trial(sim, particle, target, r)
