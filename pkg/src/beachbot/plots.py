"""Report figures, rendered headless to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def sensitivity_figure(points, wavelengths, summary, path):
    """Absorbance per focus offset, and band depth / SNR against offset."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for z in sorted({p.z_mm for p in points}):
        first = next(p for p in points if p.z_mm == z)
        ax1.plot(wavelengths, first.absorbance, lw=0.9, label=f"{z:g} mm" + ("" if first.valid else " (invalid)"))
    ax1.set_xlabel("wavelength (nm)")
    ax1.set_ylabel("absorbance")
    ax1.legend(fontsize=8)
    z = [r["z_mm"] for r in summary]
    ax2.plot(z, [r["band_amplitude"] for r in summary], "o-", label="band depth")
    ax2.set_xlabel("focus offset (mm)")
    ax2.set_ylabel("band depth (reflectance ratio)")
    ax3 = ax2.twinx()
    ax3.semilogy(z, [max(r["snr"], 1e-3) for r in summary], "s--", color="tab:red", label="SNR")
    ax3.set_ylabel("SNR")
    return _save(fig, path)


def sweep_figure(rows, path, tol_mm: float = 1.0):
    """Planar error before and after the terminal search, per trial."""
    before = np.array([r.before_mm for r in rows])
    after = np.array([r.after_mm for r in rows])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    idx = np.arange(len(rows))
    ax1.plot(idx, before, "o", ms=3, label="before terminal")
    ax1.plot(idx, after, "x", ms=4, label="after terminal")
    ax1.axhline(tol_mm, color="k", lw=0.8, ls="--")
    ax1.set_xlabel("trial")
    ax1.set_ylabel("xy error (mm)")
    ax1.legend(fontsize=8)
    bins = np.linspace(0, max(1.5, np.nanmax(np.r_[before, after]) if len(rows) else 1.5), 25)
    ax2.hist(before[np.isfinite(before)], bins, alpha=0.6, label="before")
    ax2.hist(after[np.isfinite(after)], bins, alpha=0.6, label="after")
    ax2.axvline(tol_mm, color="k", lw=0.8, ls="--")
    ax2.set_xlabel("xy error (mm)")
    ax2.legend(fontsize=8)
    return _save(fig, path)


def confusion_figure(cm, path, title: str = ""):
    norm = cm.normalized
    fig, ax = plt.subplots(figsize=(0.45 * len(cm.columns) + 3, 0.45 * len(cm.rows) + 2))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(cm.columns)), cm.columns, rotation=60, ha="right", fontsize=8)
    ax.set_yticks(range(len(cm.rows)), cm.rows, fontsize=8)
    for i in range(len(cm.rows)):
        for j in range(len(cm.columns)):
            if cm.counts[i, j]:
                ax.text(j, i, str(cm.counts[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.04)
    return _save(fig, path)


def mission_figure(scene, summary, path):
    """Particles (ground truth) and where the rover sampled."""
    fig, ax = plt.subplots(figsize=(8, 4))
    from matplotlib.colors import hsv_to_rgb

    for p in scene.particles:
        h, s, v = p.color
        ax.plot(*p.position, "o", ms=4 + p.size_mm, color=hsv_to_rgb((h / 360, s, v)), mec="k", mew=0.5)
        ax.annotate(p.material, p.position, xytext=(4, 4), textcoords="offset points", fontsize=7)
    for ep in summary.episodes:
        ax.plot(ep["x"], ep["y"], "k+", ms=9)
        if ep["label"]:
            ax.annotate(ep["label"], (ep["x"], ep["y"]), xytext=(4, -10), textcoords="offset points", fontsize=7, color="tab:red")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"found {summary.found}/{summary.total}, correct {summary.classified_correct}")
    return _save(fig, path)
