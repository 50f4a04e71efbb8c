"""One-vs-one cubic-kernel SVM over absorbance spectra.

Binary sub-problems are solved with sequential minimal optimization using
second-order working-set selection.  Features are mean-centred absorbance
(masked points sit at the centre), standardized on the training split.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GridMismatchError, TrainingError
from .spectra import (
    CLASSES,
    INTERFERANTS,
    Spectrum,
    SpectralLibrary,
    WavelengthGrid,
    absorbance,
    add_noise,
    mix_spectra,
)

VARIANTS = ("SVM3", "SVM3+I")
MODEL_FORMAT = "beachbot-svm"
MODEL_VERSION = 1
TAU = 1e-12


@dataclass(frozen=True)
class LabeledSpectrum:
    absorbance: Spectrum
    label: str
    snr: float
    interferant: bool = False

    def features(self) -> np.ndarray:
        return spectrum_features(self.absorbance)


def spectrum_features(a: Spectrum) -> np.ndarray:
    """Absorbance with its mean removed.

    A reference taken at a different collection gain than the sample shifts
    the whole absorbance by a constant; centering makes the model blind to
    it.  Masked points are set to the centred mean (zero).
    """
    v = a.intensities if a.mask is None else a.intensities[a.mask]
    return a.filled(float(v.mean())) - float(v.mean())


# -- kernel and SMO ---------------------------------------------------------


def poly_kernel(A: np.ndarray, B: np.ndarray, degree: int = 3) -> np.ndarray:
    """(1 + <a, b> / N) ** degree for every row pair."""
    return (1.0 + (A @ B.T) / A.shape[1]) ** degree


def smo(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int = 100_000, name=None):
    """Solve the soft-margin dual on a precomputed kernel matrix.

    Returns (alpha, rho) with decision f(x) = sum(alpha * y * k(x)) - rho.
    """
    n = y.size
    y = y.astype(float)
    Q = K * np.outer(y, y)
    diagK = np.diag(K).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    while True:
        vals = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            break
        up_vals = np.where(up, vals, -np.inf)
        i = int(np.argmax(up_vals))
        gmax = up_vals[i]
        low_vals = np.where(low, vals, np.inf)
        if gmax - low_vals.min() < tol:
            break
        if it >= max_iter:
            raise TrainingError(name, it)
        it += 1

        grad_diff = gmax - vals
        cand = low & (grad_diff > 0)
        quad = diagK[i] + diagK - 2.0 * K[i]
        quad = np.where(quad > 0, quad, TAU)
        obj = np.where(cand, -(grad_diff**2) / quad, np.inf)
        j = int(np.argmin(obj))

        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            q = Q[i, i] + Q[j, j] + 2.0 * Q[i, j]
            q = q if q > 0 else TAU
            delta = (-G[i] - G[j]) / q
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            q = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            q = q if q > 0 else TAU
            delta = (G[i] - G[j]) / q
            s = ai + aj
            ai -= delta
            aj += delta
            if s > C:
                if ai > C:
                    ai, aj = C, s - C
            elif aj < 0:
                aj, ai = 0.0, s
            if s > C:
                if aj > C:
                    aj, ai = C, s - C
            elif ai < 0:
                ai, aj = 0.0, s
        dai, daj = ai - alpha[i], aj - alpha[j]
        alpha[i], alpha[j] = ai, aj
        G += Q[:, i] * dai + Q[:, j] * daj

    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub = np.where(((y > 0) & (alpha == C)) | ((y < 0) & (alpha == 0)), yG, np.inf).min()
        lb = np.where(((y > 0) & (alpha == 0)) | ((y < 0) & (alpha == C)), yG, -np.inf).max()
        rho = float((ub + lb) / 2)
    return alpha, rho


# -- model ------------------------------------------------------------------


@dataclass
class BinarySVM:
    positive: str
    negative: str
    sv_index: np.ndarray  # rows of TrainedClassifier.support_vectors
    alpha: np.ndarray
    y: np.ndarray
    rho: float


@dataclass
class TrainedClassifier:
    classes: tuple[str, ...]
    variant: str
    C: float
    kernel_degree: int
    grid: WavelengthGrid
    mean: np.ndarray
    scale: np.ndarray
    support_vectors: np.ndarray  # standardized features
    machines: list[BinarySVM]
    seed: int = 0

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def decision_values(self, X: np.ndarray) -> np.ndarray:
        """Decision value of every binary machine for each row (n, n_machines)."""
        Z = self.standardize(np.atleast_2d(X))
        Kx = poly_kernel(Z, self.support_vectors, self.kernel_degree)
        out = np.empty((Z.shape[0], len(self.machines)))
        for m, svm in enumerate(self.machines):
            out[:, m] = Kx[:, svm.sv_index] @ (svm.alpha * svm.y) - svm.rho
        return out

    def to_json(self) -> dict:
        g = self.grid.points
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "variant": self.variant,
            "classes": list(self.classes),
            "C": self.C,
            "kernel": {"type": "poly", "degree": self.kernel_degree, "form": "(1 + <x, y> / N) ** degree"},
            "grid": [float(v) for v in g],
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "seed": self.seed,
            "support_vectors": self.support_vectors.tolist(),
            "machines": [
                {
                    "positive": m.positive,
                    "negative": m.negative,
                    "sv_index": m.sv_index.tolist(),
                    "alpha": m.alpha.tolist(),
                    "y": m.y.tolist(),
                    "rho": m.rho,
                }
                for m in self.machines
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, doc: dict) -> "TrainedClassifier":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a beachbot SVM model document")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        machines = [
            BinarySVM(
                m["positive"],
                m["negative"],
                np.array(m["sv_index"], dtype=int),
                np.array(m["alpha"], dtype=float),
                np.array(m["y"], dtype=float),
                float(m["rho"]),
            )
            for m in doc["machines"]
        ]
        return cls(
            tuple(doc["classes"]),
            doc["variant"],
            float(doc["C"]),
            int(doc["kernel"]["degree"]),
            WavelengthGrid(np.array(doc["grid"])),
            np.array(doc["mean"]),
            np.array(doc["scale"]),
            np.array(doc["support_vectors"]).reshape(-1, len(doc["grid"])),
            machines,
            int(doc.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "TrainedClassifier":
        return cls.from_json(json.loads(Path(path).read_text()))


def _canonical_order(X: np.ndarray, labels: Sequence[str]) -> np.ndarray:
    keys = [(lab, hashlib.sha1(row.tobytes()).hexdigest()) for lab, row in zip(labels, X)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=int)


def train(
    dataset: Sequence[LabeledSpectrum],
    variant: str = "SVM3+I",
    C: float = 10.0,
    seed: int = 0,
    degree: int = 3,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> TrainedClassifier:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rows = [d for d in dataset if variant == "SVM3+I" or not d.interferant]
    labels = [d.label for d in rows]
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    for c in classes:
        if labels.count(c) < 5:
            raise ValueError(f"class {c!r} has fewer than 5 examples")
    grid = rows[0].absorbance.grid
    if any(d.absorbance.grid != grid for d in rows):
        raise GridMismatchError("training spectra are on different grids")

    X = np.array([d.features() for d in rows])
    # Row order must not matter: sort canonically, then apply the seeded shuffle.
    order = _canonical_order(X, labels)
    order = order[np.random.default_rng(seed).permutation(order.size)]
    X = X[order]
    lab = np.array(labels, dtype=object)[order]

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    K = poly_kernel(Z, Z, degree)

    used = np.zeros(len(Z), dtype=bool)
    raw = []
    for a, b in itertools.combinations(classes, 2):
        idx = np.flatnonzero((lab == a) | (lab == b))
        y = np.where(lab[idx] == a, 1.0, -1.0)
        alpha, rho = smo(K[np.ix_(idx, idx)], y, C, tol, max_iter, name=f"{a}-vs-{b}")
        sv = alpha > 0
        used[idx[sv]] = True
        raw.append((a, b, idx[sv], alpha[sv], y[sv], rho))

    pool = np.flatnonzero(used)
    remap = -np.ones(len(Z), dtype=int)
    remap[pool] = np.arange(pool.size)
    machines = [BinarySVM(a, b, remap[i], al, yy, rho) for a, b, i, al, yy, rho in raw]
    return TrainedClassifier(classes, variant, float(C), degree, grid, mean, scale, Z[pool], machines, seed)


def _vote(model: TrainedClassifier, dec: np.ndarray) -> tuple[str, float]:
    votes = dict.fromkeys(model.classes, 0)
    score = dict.fromkeys(model.classes, 0.0)
    for m, f in zip(model.machines, dec):
        winner = m.positive if f > 0 else m.negative
        votes[winner] += 1
        score[m.positive] += f
        score[m.negative] -= f
    best = min(model.classes, key=lambda c: (-votes[c], -score[c], c))
    return best, votes[best] / (len(model.classes) - 1)


def predict(model: TrainedClassifier, spec: Spectrum) -> tuple[str, float]:
    """Return (label, margin); margin is the winner's share of its possible votes."""
    if spec.grid != model.grid:
        raise GridMismatchError("spectrum grid differs from the training grid")
    return _vote(model, model.decision_values(spectrum_features(spec))[0])


def predict_many(model: TrainedClassifier, spectra: Sequence[Spectrum]) -> list[tuple[str, float]]:
    for s in spectra:
        if s.grid != model.grid:
            raise GridMismatchError("spectrum grid differs from the training grid")
    dec = model.decision_values(np.array([spectrum_features(s) for s in spectra]))
    return [_vote(model, row) for row in dec]


# -- evaluation -------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are true labels present in the test set; columns are model classes."""

    rows: tuple[str, ...]
    columns: tuple[str, ...]
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=1, keepdims=True)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(sum(self.counts[i, self.columns.index(r)] for i, r in enumerate(self.rows) if r in self.columns))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def false_positives(self) -> dict[str, int]:
        out = {}
        for j, c in enumerate(self.columns):
            col = self.counts[:, j]
            out[c] = int(col.sum() - sum(col[i] for i, r in enumerate(self.rows) if r == c))
        return out

    def false_negatives(self) -> dict[str, int]:
        return {
            r: int(self.counts[i].sum() - (self.counts[i, self.columns.index(r)] if r in self.columns else 0))
            for i, r in enumerate(self.rows)
        }

    def to_csv(self, path, normalized: bool = False):
        data = self.normalized if normalized else self.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *self.columns])
            for r, row in zip(self.rows, data):
                w.writerow([r, *(repr(float(v)) if normalized else int(v) for v in row)])


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    accuracy: float
    false_positives: dict[str, int]
    false_negatives: dict[str, int]
    predictions: list[tuple[str, float]] = field(repr=False, default_factory=list)


def evaluate(model: TrainedClassifier, testset: Sequence[LabeledSpectrum]) -> Evaluation:
    if not testset:
        raise ValueError("empty test set")
    preds = predict_many(model, [d.absorbance for d in testset])
    rows = tuple(c for c in sorted({d.label for d in testset}))
    cols = model.classes
    counts = np.zeros((len(rows), len(cols)), dtype=int)
    for d, (p, _) in zip(testset, preds):
        counts[rows.index(d.label), cols.index(p)] += 1
    cm = ConfusionMatrix(rows, cols, counts)
    return Evaluation(cm, cm.accuracy, cm.false_positives(), cm.false_negatives(), preds)


# -- synthetic bench dataset ------------------------------------------------

FULL_SCALE = 10_000.0
DARK_LEVEL = 200.0


def bench_measurement(
    lib: SpectralLibrary,
    parts: Sequence[tuple[str, float]],
    snr: float,
    rng: np.random.Generator,
    gain: float = 1.0,
) -> Spectrum:
    """Absorbance of a bench measurement of a material mixture against sand.

    Sample, reference and dark each carry their own noise draw; ``gain``
    scales only the sample (collection efficiency).
    """
    grid = lib.grid
    mix = mix_spectra([(lib.reflectance(m), w) for m, w in parts])
    dark_clean = Spectrum(grid, np.full(len(grid), DARK_LEVEL), "dark")
    sample = Spectrum(grid, DARK_LEVEL + add_noise(
        Spectrum(grid, FULL_SCALE * gain * mix.intensities), snr, rng).intensities)
    reference = Spectrum(grid, DARK_LEVEL + add_noise(
        Spectrum(grid, FULL_SCALE * lib.reflectance("sand").intensities), snr, rng).intensities,
        "reference")
    dark = Spectrum(grid, add_noise(dark_clean, snr, rng).intensities, "dark")
    return absorbance(sample, dark, reference)


def make_dataset(
    lib: SpectralLibrary,
    seed: int,
    snrs: Sequence[float] = (500, 2000, 15000),
    n_clean: int = 8,
    n_per_interferant: int = 1,
    weights: Sequence[float] = (0.1, 0.2, 0.3),
    classes: Sequence[str] = CLASSES,
    gain_jitter: float = 0.1,
) -> list[LabeledSpectrum]:
    """Noisy absorbance spectra per class and SNR, plus interferant mixtures.

    Interferant rows mix the material with water or plant matter at each of
    ``weights`` and carry ``interferant=True``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for c in classes:
        for snr in snrs:
            for _ in range(n_clean):
                g = 1.0 + rng.uniform(-gain_jitter, gain_jitter)
                out.append(LabeledSpectrum(bench_measurement(lib, [(c, 1.0)], snr, rng, g), c, snr))
            for inter in INTERFERANTS:
                for w in weights:
                    for _ in range(n_per_interferant):
                        g = 1.0 + rng.uniform(-gain_jitter, gain_jitter)
                        a = bench_measurement(lib, [(c, 1.0 - w), (inter, w)], snr, rng, g)
                        out.append(LabeledSpectrum(a, c, snr, True))
    return out


DATASET_MANIFEST = "manifest.json"


def save_dataset(data: Sequence[LabeledSpectrum], directory) -> Path:
    """One absorbance CSV per spectrum plus a JSON manifest of labels."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, row in enumerate(data):
        name = f"{i:05d}_{row.label}.csv"
        row.absorbance.to_csv(d / name)
        entries.append({"file": name, "label": row.label, "snr": row.snr, "interferant": row.interferant})
    (d / DATASET_MANIFEST).write_text(json.dumps({"spectra": entries}, indent=1) + "\n", encoding="utf-8")
    return d


def load_dataset(directory) -> list[LabeledSpectrum]:
    d = Path(directory)
    doc = json.loads((d / DATASET_MANIFEST).read_text(encoding="utf-8"))
    return [LabeledSpectrum(Spectrum.from_csv(d / e["file"], role="absorbance"), e["label"], float(e["snr"]),
                            bool(e["interferant"])) for e in doc["spectra"]]
