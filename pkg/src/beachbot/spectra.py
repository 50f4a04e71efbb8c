"""Synthetic NIR reflectance library, noise model and absorbance.

Reflectance signatures are a flat baseline minus Gaussian overtone bands.
They are synthetic stand-ins, not measured polymer spectra.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import GridMismatchError, InvalidMeasurementError

PLASTICS = ("PP", "PET", "PVC", "PS", "nylon", "PLA", "HDPE", "LDPE", "rubber")
NON_PLASTICS = ("cardboard", "wood", "bark", "dry_grass")
CLASSES = PLASTICS + NON_PLASTICS
BACKGROUND = "sand"
INTERFERANTS = ("water", "plant_matter")
MATERIALS = CLASSES + (BACKGROUND,) + INTERFERANTS

ROLES = ("dark", "reference", "sample", "absorbance")
MAX_MASKED_FRACTION = 0.2


@dataclass(frozen=True)
class WavelengthGrid:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("grid needs at least two points")
        if np.any(np.diff(p) <= 0):
            raise ValueError("grid must be strictly increasing")
        if p[0] < 900 or p[-1] > 1700:
            raise ValueError("grid must lie within 900-1700 nm")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @classmethod
    def linear(cls, start: float = 900.0, stop: float = 1700.0, n: int = 512) -> "WavelengthGrid":
        return cls(np.linspace(start, stop, n))

    def __len__(self):
        return self.points.size

    @property
    def spacing(self) -> float:
        return float(np.mean(np.diff(self.points)))

    def __eq__(self, other):
        return isinstance(other, WavelengthGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


DEFAULT_GRID = WavelengthGrid.linear()


@dataclass(frozen=True)
class Spectrum:
    grid: WavelengthGrid
    intensities: np.ndarray
    role: str = "sample"
    mask: np.ndarray | None = None  # True where the value is valid; absorbance only

    def __post_init__(self):
        x = np.array(self.intensities, dtype=float)
        if x.shape != (len(self.grid),):
            raise GridMismatchError(f"{x.shape[0]} samples for a {len(self.grid)}-point grid")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role != "absorbance" and np.any(x < 0):
            raise ValueError(f"{self.role} intensities must be non-negative")
        x.setflags(write=False)
        object.__setattr__(self, "intensities", x)
        if self.mask is not None:
            m = np.array(self.mask, dtype=bool)
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    @property
    def masked_fraction(self) -> float:
        return 0.0 if self.mask is None else float(1.0 - self.mask.mean())

    def filled(self, value: float = 0.0) -> np.ndarray:
        """Intensities with masked points replaced by ``value``."""
        if self.mask is None:
            return self.intensities.copy()
        return np.where(self.mask, self.intensities, value)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["wavelength_nm", "intensity"])
            for lam, val in zip(self.grid.points, self.intensities):
                w.writerow([repr(float(lam)), repr(float(val))])

    @classmethod
    def from_csv(cls, path, role: str = "sample") -> "Spectrum":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != ["wavelength_nm", "intensity"]:
                raise ValueError(f"unexpected header {header}")
            rows = [(float(a), float(b)) for a, b in r]
        lam, val = zip(*rows)
        vals = np.array(val)
        mask = None
        if role == "absorbance" and np.any(np.isnan(vals)):
            mask = ~np.isnan(vals)
        return cls(WavelengthGrid(np.array(lam)), vals, role, mask)


@dataclass(frozen=True)
class MaterialSignature:
    material: str
    bands: tuple[tuple[float, float, float], ...]  # (center nm, sigma nm, amplitude)
    baseline: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(tuple(map(float, b)) for b in self.bands))
        for c, w, a in self.bands:
            if not 900 <= c <= 1700:
                raise ValueError(f"{self.material}: band center {c} off the grid range")
            if a <= 0 or w <= 0:
                raise ValueError(f"{self.material}: band width and amplitude must be positive")


class SpectralLibrary(dict):
    """Mapping material -> MaterialSignature, bound to a grid."""

    def __init__(self, signatures: Iterable[MaterialSignature], grid: WavelengthGrid = DEFAULT_GRID):
        super().__init__((s.material, s) for s in signatures)
        self.grid = grid
        self._cache: dict[str, Spectrum] = {}

    def reflectance(self, material: str) -> Spectrum:
        if material not in self._cache:
            self._cache[material] = synthesize_reflectance(self[material], self.grid)
        return self._cache[material]

    def to_json(self) -> dict:
        g = self.grid.points
        return {
            "format": "beachbot-spectral-library",
            "version": 1,
            "grid": {"start_nm": float(g[0]), "stop_nm": float(g[-1]), "points": int(g.size)},
            "band_width": "gaussian standard deviation in nm",
            "materials": {
                name: {"baseline": s.baseline, "bands": [list(b) for b in s.bands]}
                for name, s in self.items()
            },
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, doc: dict, grid: WavelengthGrid | None = None) -> "SpectralLibrary":
        if grid is None:
            g = doc["grid"]
            grid = WavelengthGrid.linear(g["start_nm"], g["stop_nm"], g["points"])
        sigs = [
            MaterialSignature(name, tuple(tuple(b) for b in m["bands"]), m["baseline"])
            for name, m in doc["materials"].items()
        ]
        return cls(sigs, grid)

    @classmethod
    def load(cls, path=None, grid: WavelengthGrid | None = None) -> "SpectralLibrary":
        if path is None:
            text = resources.files("beachbot").joinpath("data/spectral_library.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_json(json.loads(text), grid)


def default_library() -> SpectralLibrary:
    return SpectralLibrary.load()


def synthesize_reflectance(sig: MaterialSignature, grid: WavelengthGrid = DEFAULT_GRID) -> Spectrum:
    lam = grid.points
    r = np.full(lam.shape, sig.baseline)
    for c, w, a in sig.bands:
        r -= a * np.exp(-0.5 * ((lam - c) / w) ** 2)
    return Spectrum(grid, np.clip(r, 0.0, None), "sample")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def add_gaussian(s: Spectrum, sigma: float, seed) -> Spectrum:
    """Add N(0, sigma) noise; negative counts are clipped to zero."""
    noisy = s.intensities + _rng(seed).normal(0.0, sigma, s.intensities.shape)
    if s.role != "absorbance":
        noisy = np.clip(noisy, 0.0, None)
    return Spectrum(s.grid, noisy, s.role, s.mask)


def add_noise(s: Spectrum, snr: float, seed) -> Spectrum:
    """Zero-mean Gaussian noise with sigma = mean(intensities) / snr.

    ``snr=math.inf`` returns the spectrum unchanged.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    if math.isinf(snr):
        return s
    return add_gaussian(s, float(np.mean(s.intensities)) / snr, seed)


def _same_grid(*spectra: Spectrum):
    g = spectra[0].grid
    for s in spectra[1:]:
        if s.grid != g:
            raise GridMismatchError("spectra are on different wavelength grids")


def absorbance(
    sample: Spectrum,
    dark: Spectrum,
    reference: Spectrum,
    max_masked: float = MAX_MASKED_FRACTION,
) -> Spectrum:
    """A = -log10((sample - dark) / (reference - dark)), pointwise.

    Points with a non-positive numerator or denominator are masked (NaN).
    More than ``max_masked`` of them raises InvalidMeasurementError.
    """
    _same_grid(sample, dark, reference)
    num = sample.intensities - dark.intensities
    den = reference.intensities - dark.intensities
    ok = (num > 0) & (den > 0)
    frac = 1.0 - ok.mean()
    if frac > max_masked:
        raise InvalidMeasurementError(frac, max_masked)
    a = np.full(num.shape, np.nan)
    a[ok] = -np.log10(num[ok] / den[ok])
    return Spectrum(sample.grid, a, "absorbance", ok)


def mix_spectra(parts: Sequence[tuple[Spectrum, float]]) -> Spectrum:
    if not parts:
        raise ValueError("nothing to mix")
    spectra = [p[0] for p in parts]
    w = np.array([p[1] for p in parts], dtype=float)
    if np.any(w < 0):
        raise ValueError("mixing weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixing weights sum to {w.sum()!r}, not 1")
    _same_grid(*spectra)
    out = np.zeros(len(spectra[0].grid))
    for s, wi in zip(spectra, w):
        out += wi * s.intensities
    return Spectrum(spectra[0].grid, out, spectra[0].role)


def band_energy(a: Spectrum) -> float:
    """RMS of the absorbance about its mean over valid points."""
    v = a.intensities if a.mask is None else a.intensities[a.mask]
    return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


@dataclass(frozen=True)
class Spectrometer:
    """Counts model: dark offset plus a read-noise floor fixed at full signal.

    ``noise_floor`` is the count sigma; at perfect focus on sand the signal
    mean over the floor equals ``snr_max``.
    """

    snr_max: float = 15_000.0
    full_scale: float = 10_000.0
    dark_level: float = 200.0
    reference_mean: float = 0.6
    min_valid_snr: float = 100.0

    @classmethod
    def for_library(cls, lib: SpectralLibrary, **kw) -> "Spectrometer":
        return cls(reference_mean=float(lib.reflectance(BACKGROUND).intensities.mean()), **kw)

    @property
    def noise_floor(self) -> float:
        return self.full_scale * self.reference_mean / self.snr_max

    def snr_estimate(self, sample: Spectrum, dark: Spectrum) -> float:
        return float(np.mean(sample.intensities - dark.intensities)) / self.noise_floor

    def counts(self, reflectance: Spectrum, gain: float, seed, role: str = "sample") -> Spectrum:
        """Noisy counts for a reflectance collected with efficiency ``gain``."""
        clean = Spectrum(reflectance.grid, self.dark_level + self.full_scale * gain * reflectance.intensities, role)
        return add_gaussian(clean, self.noise_floor, seed)

    def dark(self, grid: WavelengthGrid, seed) -> Spectrum:
        return add_gaussian(Spectrum(grid, np.full(len(grid), self.dark_level), "dark"), self.noise_floor, seed)


@dataclass(frozen=True)
class Assessment:
    valid: bool
    snr: float
    masked_fraction: float
    absorbance: Spectrum | None
    reason: str = ""


def assess(sample: Spectrum, dark: Spectrum, reference: Spectrum, spectrometer: Spectrometer) -> Assessment:
    """Absorbance plus the validity verdict: masking limit and an SNR floor."""
    snr = spectrometer.snr_estimate(sample, dark)
    try:
        a = absorbance(sample, dark, reference)
    except InvalidMeasurementError as exc:
        return Assessment(False, snr, exc.masked_fraction, None, "masked")
    if snr < spectrometer.min_valid_snr:
        return Assessment(False, snr, a.masked_fraction, a, "low_snr")
    return Assessment(True, snr, a.masked_fraction, a)


def fit_coverage(a: Spectrum, lib: SpectralLibrary, candidates: Sequence[str] = CLASSES) -> tuple[str, float, float]:
    """Best single-material explanation of a sand-referenced absorbance.

    Fits transmittance T = p * T_m + q (p, q >= 0), i.e. a linear mix of the
    material with sand under an unknown overall gain.  Returns
    (material, coverage p / (p + q), rms residual).
    """
    m = a.mask if a.mask is not None else np.ones(len(a.grid), dtype=bool)
    t = 10.0 ** (-a.intensities[m])
    sand = lib.reflectance(BACKGROUND).intensities[m]
    best = (None, 0.0, np.inf)
    for name in candidates:
        tm = lib.reflectance(name).intensities[m] / sand
        X = np.column_stack([tm, np.ones_like(tm)])
        coef, *_ = np.linalg.lstsq(X, t, rcond=None)
        p, q = coef
        if p < 0:
            p, q = 0.0, float(t.mean())
        elif q < 0:
            p, q = float(tm @ t / (tm @ tm)), 0.0
        res = float(np.sqrt(np.mean((p * tm + q - t) ** 2)) / max(p + q, 1e-300))
        if res < best[2]:
            best = (name, p / (p + q) if p + q > 0 else 0.0, res)
    return best
