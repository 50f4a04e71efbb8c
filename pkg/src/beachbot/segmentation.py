"""Candidate-particle and NIR-spot detection on HSV scene images.

Thresholds are declared defaults, not values recovered from field data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import PixelCoord

LED = "LED"
NIR_LAMP = "NIR_lamp"
ILLUMINATIONS = (LED, NIR_LAMP)

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SceneImage:
    """H x W x 3 array of (hue deg, saturation, value)."""

    hsv: np.ndarray
    illumination: str = LED

    def __post_init__(self):
        a = np.asarray(self.hsv, dtype=float)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError("expected an H x W x 3 HSV array")
        if a.size and (a[..., 0].min() < 0 or a[..., 0].max() >= 360):
            raise ValueError("hue must be in [0, 360)")
        if a.size and (a.min() < 0 or a[..., 1:].max() > 1):
            raise ValueError("saturation and value must be in [0, 1]")
        if self.illumination not in ILLUMINATIONS:
            raise ValueError(f"unknown illumination {self.illumination!r}")
        a.setflags(write=False)
        object.__setattr__(self, "hsv", a)

    @property
    def size(self) -> tuple[int, int]:
        return self.hsv.shape[1], self.hsv.shape[0]

    @property
    def hue(self):
        return self.hsv[..., 0]

    @property
    def saturation(self):
        return self.hsv[..., 1]

    @property
    def value(self):
        return self.hsv[..., 2]


@dataclass(frozen=True)
class Detection:
    centroid: PixelCoord
    area: int
    bbox: tuple[int, int, int, int]  # u_min, v_min, u_max, v_max (inclusive)
    kind: str
    spot_diameter: float | None = None
    circularity: float = 1.0


@dataclass(frozen=True)
class SegmentationParams:
    s_min: float = 0.45
    v_min: float = 0.15
    sand_hue: tuple[float, float] = (35.0, 60.0)
    sand_sat_max: float = 0.35
    min_area: float = 2.0
    max_area: float = 2000.0
    c_min: float = 0.5
    spot_value_min: float = 0.9

    @classmethod
    def for_camera(cls, meters_per_pixel: float, min_particle_m: float = 1e-3, **kw) -> "SegmentationParams":
        """Area floor set to the projected area of a ``min_particle_m`` disc."""
        area = math.pi * (min_particle_m / 2 / meters_per_pixel) ** 2
        return cls(min_area=area, **kw)


def _components(mask: np.ndarray):
    """Label 8-connected components with holes filled; drop components nested inside another."""
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return labels, 0
    slices = ndimage.find_objects(labels)
    fills = [ndimage.binary_fill_holes(labels[sl] == k) for k, sl in enumerate(slices, start=1)]
    # Largest filled region first so an enclosing parent claims its holes.
    order = sorted(range(n), key=lambda i: (-int(fills[i].sum()), i))
    filled = np.zeros_like(labels)
    for i in order:
        region = filled[slices[i]]
        region[fills[i] & (region == 0)] = i + 1
    # A component whose pixels sit inside another's filled region is a child.
    keep = np.zeros(n + 1, dtype=bool)
    for i, sl in enumerate(slices):
        keep[i + 1] = filled[sl][labels[sl] == i + 1].max() == i + 1
    filled[~keep[filled]] = 0
    return filled, n


def _perimeters(labels: np.ndarray, n: int) -> np.ndarray:
    """Exposed 4-neighbour edge count per label, scaled by pi/4."""
    pad = np.pad(labels, 1)
    edges = np.zeros(n + 1)
    for a, b in (
        (pad[1:-1, 1:-1], pad[:-2, 1:-1]),
        (pad[1:-1, 1:-1], pad[2:, 1:-1]),
        (pad[1:-1, 1:-1], pad[1:-1, :-2]),
        (pad[1:-1, 1:-1], pad[1:-1, 2:]),
    ):
        exposed = (a != b) & (a > 0)
        edges += np.bincount(a[exposed], minlength=n + 1)
    return edges * (math.pi / 4)


def _measure(labels: np.ndarray, n: int, kind: str):
    out = []
    if n == 0:
        return out
    perim = _perimeters(labels, n)
    for k, sl in enumerate(ndimage.find_objects(labels, max_label=n), start=1):
        if sl is None:
            continue
        vv, uu = np.nonzero(labels[sl] == k)
        if vv.size == 0:
            continue
        area = vv.size
        circ = float(min(1.0, 4 * math.pi * area / perim[k] ** 2))
        c = PixelCoord(float(uu.mean() + sl[1].start), float(vv.mean() + sl[0].start))
        bbox = (sl[1].start, sl[0].start, sl[1].stop - 1, sl[0].stop - 1)
        out.append((int(area), c, bbox, circ))
    return out


def candidate_mask(img: SceneImage, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    lo, hi = params.sand_hue
    in_band = (img.hue >= lo) & (img.hue <= hi)
    return (img.saturation >= params.s_min) & (img.value >= params.v_min) & ~in_band


def detect_candidates(img: SceneImage, params: SegmentationParams = SegmentationParams()) -> list[Detection]:
    """Saturated, non-sand-hued blobs filtered by area and circularity.

    Sorted by area (largest first), ties by (u, v).
    """
    labels, n = _components(candidate_mask(img, params))
    dets = [
        Detection(c, a, bb, "candidate_particle", circularity=circ)
        for a, c, bb, circ in _measure(labels, n, "candidate_particle")
        if params.min_area <= a <= params.max_area and circ >= params.c_min
    ]
    dets.sort(key=lambda d: (-d.area, d.centroid.u, d.centroid.v))
    return dets


def detect_nir_spot(img: SceneImage, params: SegmentationParams = SegmentationParams()) -> Detection | None:
    """Largest high-value blob; diameter from the equal-area circle."""
    if img.illumination != NIR_LAMP:
        return None
    labels, n = _components(img.value >= params.spot_value_min)
    blobs = _measure(labels, n, "nir_spot")
    if not blobs:
        return None
    a, c, bb, circ = min(blobs, key=lambda b: (-b[0], b[1].u, b[1].v))
    return Detection(c, a, bb, "nir_spot", spot_diameter=2 * math.sqrt(a / math.pi), circularity=circ)


# -- portable pixmap I/O ------------------------------------------------------


def to_rgb8(img: SceneImage) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb

    hsv = img.hsv.copy()
    hsv[..., 0] /= 360.0
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def write_ppm(img: SceneImage, path):
    rgb = to_rgb8(img)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_ppm(path, illumination: str = LED) -> SceneImage:
    from matplotlib.colors import rgb_to_hsv

    data = open(path, "rb").read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError("only binary P6 pixmaps are supported")
    w, h, maxval = map(int, tokens[1:])
    pos += 1
    rgb = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    hsv = rgb_to_hsv(rgb.astype(float) / maxval)
    hsv[..., 0] = (hsv[..., 0] * 360.0) % 360.0
    return SceneImage(hsv, illumination)
