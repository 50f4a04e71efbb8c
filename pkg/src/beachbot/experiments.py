"""Monte-Carlo servo sweep and the focus-offset sensitivity study."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .kinematics import NOMINAL_Q, forward_cartesian, solve_position
from .scene import COLORS, ActuationModel, EffectorState, Particle, Scene, Simulator, Terrain
from .servo import ServoParams, make_trial, run_episode
from .spectra import assess

SWEEP_HEADER = ("trial", "seed", "offset_mm", "before_mm", "after_mm", "probes", "status", "material", "hint")


@dataclass(frozen=True)
class SweepRow:
    trial: int
    seed: int
    offset_mm: float
    before_mm: float
    after_mm: float
    probes: int
    status: str
    material: str
    hint: str | None

    def as_csv(self):
        return [self.trial, self.seed, f"{self.offset_mm:.6f}", f"{self.before_mm:.6f}", f"{self.after_mm:.6f}",
                self.probes, self.status, self.material, self.hint or ""]


def servo_sweep(n: int = 100, seed: int = 0, max_offset: float = 0.03, params: ServoParams = ServoParams(),
                actuation: ActuationModel = ActuationModel()) -> list[SweepRow]:
    """Independent seeded trials; trial i uses seed ``seed * 100003 + i``."""
    rows = []
    for i in range(n):
        s = seed * 100_003 + i
        tr = make_trial(s, max_offset, actuation=actuation)
        r = run_episode(tr.sim, tr.target, params, truth=tr.particle)
        rows.append(SweepRow(i, s, 1e3 * tr.offset, 1e3 * r.xy_error_before, 1e3 * r.xy_error_after,
                             r.probes, r.status, tr.particle.material, r.material_hint))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def sweep_success(rows, tol_mm: float = 1.0) -> float:
    return sum(r.status == "sampled" and r.after_mm <= tol_mm for r in rows) / len(rows)


# -- sensitivity ----------------------------------------------------------------

DEFAULT_OFFSETS_MM = (0.0, 0.25, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class SensitivityPoint:
    z_mm: float
    repeat: int
    valid: bool
    reason: str
    snr: float
    masked_fraction: float
    band_amplitude: float
    absorbance: np.ndarray  # NaN where masked


def band_amplitude(ratio: np.ndarray, wavelengths: np.ndarray, bands) -> float:
    """Depth of the material bands in a reflectance ratio.

    Median of the points farther than 3 sigma from every band, minus the
    mean within half a sigma of the band centres.
    """
    near = np.zeros(wavelengths.shape, dtype=bool)
    far = np.ones(wavelengths.shape, dtype=bool)
    for c, sigma, _ in bands:
        d = np.abs(wavelengths - c)
        near |= d <= 0.5 * sigma
        far &= d > 3 * sigma
    return float(np.nanmedian(ratio[far]) - np.nanmean(ratio[near]))


def _set_focus(sim: Simulator, z: float):
    """Place the focus ``z`` above the ground directly over the current spot."""
    pz = sim.pose
    ground = float(sim.scene.terrain.height(*pz.spot_center))
    w = forward_cartesian(sim.geom, sim.state.q).as_array()
    goal = w + (0.0, 0.0, ground + z - pz.focus[2])
    q = solve_position(sim.geom, goal, sim.state.q)
    sim.state = EffectorState(q, sim.state.rover, lamp=True)


def sensitivity_sweep(offsets_mm=DEFAULT_OFFSETS_MM, material: str = "PP", repeats: int = 5, seed: int = 0,
                      size_mm: float = 5.0) -> list[SensitivityPoint]:
    """Absorbance of a particle measured at fixed focus offsets.

    The reference is taken in focus on clean sand; only the sample is
    defocused, so every loss of signal shows up in the absorbance.
    """
    sim = Simulator(Scene(Terrain(), (), seed), EffectorState(NOMINAL_Q, lamp=True),
                    actuation=ActuationModel(0.0, 0.0), rng=np.random.default_rng(seed))
    centre = tuple(float(c) for c in sim.pose.spot_center)
    clean_spot = (centre[0], centre[1] + 0.02)
    particle = Particle(centre, size_mm, COLORS["blue"], material)
    sim.scene = Scene(Terrain(), (particle,), seed)
    home = sim.state

    # reference: move 20 mm sideways onto sand, in focus
    w = forward_cartesian(sim.geom, home.q).as_array()
    sim.state = EffectorState(solve_position(sim.geom, w + (0.0, clean_spot[1] - centre[1], 0.0), home.q), lamp=True)
    _set_focus(sim, 0.0)
    ref, dark = sim.reference()

    lib = sim.lib
    bands = lib[material].bands
    wl = lib.grid.points
    out = []
    for z in offsets_mm:
        for k in range(repeats):
            sim.state = home
            _set_focus(sim, 1e-3 * z)
            s = sim.sample()
            a = assess(s.sample, s.dark, ref, sim.spectrometer)
            num = s.sample.intensities - s.dark.intensities
            den = ref.intensities - dark.intensities
            ratio = num / den
            ok = (num > 0) & (den > 0)
            spec = np.full(ratio.shape, np.nan)
            spec[ok] = -np.log10(ratio[ok])
            out.append(SensitivityPoint(float(z), k, a.valid, a.reason, a.snr, a.masked_fraction,
                                        band_amplitude(ratio, wl, bands), spec))
    return out


def summarize_sensitivity(points) -> list[dict]:
    rows = []
    for z in sorted({p.z_mm for p in points}):
        ps = [p for p in points if p.z_mm == z]
        rows.append({
            "z_mm": z,
            "valid_fraction": sum(p.valid for p in ps) / len(ps),
            "snr": float(np.mean([p.snr for p in ps])),
            "masked_fraction": float(np.mean([p.masked_fraction for p in ps])),
            "band_amplitude": float(np.mean([p.band_amplitude for p in ps])),
        })
    return rows


def write_sensitivity_csv(points, wavelengths, summary_path, spectra_path):
    summary = summarize_sensitivity(points)
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("z_mm", "valid_fraction", "snr", "masked_fraction", "band_amplitude"))
        for r in summary:
            w.writerow([f"{r['z_mm']:g}", f"{r['valid_fraction']:.3f}", f"{r['snr']:.6g}",
                        f"{r['masked_fraction']:.6f}", f"{r['band_amplitude']:.6g}"])
    with open(spectra_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("z_mm", "repeat", "wavelength_nm", "absorbance"))
        for p in points:
            for wl, a in zip(wavelengths, p.absorbance):
                w.writerow([f"{p.z_mm:g}", p.repeat, f"{wl:.4f}", "" if math.isnan(a) else f"{a:.8g}"])
    return summary
