"""Full-reference image quality metrics on 8-bit images."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2


def _pair(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, mask: np.ndarray | None = None) -> float:
    a, b = _pair(a, b)
    d = (a - b) ** 2
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
        if d.size == 0:
            raise ValueError("mask selects no pixels")
    return float(d.mean())


def psnr(a, b, mask: np.ndarray | None = None) -> float:
    """10 log10(255^2 / MSE); identical inputs give ``inf``.

    ``mask`` (H, W) optionally restricts the pixels that are compared.
    """
    err = mse(a, b, mask)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax * ax / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-position SSIM of two single-channel images (valid window positions only)."""
    win = _gaussian_window()

    def filt(x):
        return ndimage.correlate(x, win, mode="constant")[5:-5, 5:-5]

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Single-scale SSIM, Gaussian 11x11 window with sigma 1.5, averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} px on each side")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = [ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))
