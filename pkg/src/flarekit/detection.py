"""Light-source detection on 8-bit images."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

LUMA = np.array([0.2126, 0.7152, 0.0722])
DEFAULT_LUM_THRESHOLD = 0.95 * 255


@dataclass(frozen=True)
class LightSource:
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive end)
    area: int
    saturation_fraction: float

    @property
    def radius(self) -> float:
        """Radius of the disk with the same area."""
        return float(np.sqrt(self.area / np.pi))

    def to_dict(self):
        return asdict(self)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return xs * xs + ys * ys <= r * r


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def refine_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological open then close with a disk; the frame border is neutral."""
    if radius <= 0:
        return mask.copy()
    se = disk(radius)
    opened = ndimage.binary_opening(mask, structure=se)
    padded = np.pad(opened, radius, mode="edge")
    closed = ndimage.binary_closing(padded, structure=se)
    return closed[radius:-radius, radius:-radius]


def detect_light_sources(img: np.ndarray, lum_threshold: float = DEFAULT_LUM_THRESHOLD,
                         min_area: int = 20, morph_radius: int = 2,
                         background_mask: np.ndarray | None = None) -> list[LightSource]:
    """Threshold luminance, drop masked background, clean up, split into components.

    Returns one LightSource per component of at least ``min_area`` pixels,
    largest first.
    """
    img = np.asarray(img)
    mask = luminance(img) >= lum_threshold
    if background_mask is not None:
        mask &= ~np.asarray(background_mask, dtype=bool)
    mask = refine_mask(mask, morph_radius)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    saturated = img.max(axis=2) >= 255
    sources = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == i
        area = int(comp.sum())
        if area < min_area:
            continue
        ys, xs = np.nonzero(comp)
        cx = float(xs.mean() + sl[1].start)
        cy = float(ys.mean() + sl[0].start)
        sat = float(saturated[sl][comp].mean())
        sources.append(LightSource((cx, cy), (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop),
                                   area, sat))
    sources.sort(key=lambda s: (-s.area, s.centroid[1], s.centroid[0]))
    return sources
