"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when the
``FLAREKIT_PURE_PYTHON`` environment variable is set, the numpy fallback is
used. Both backends produce bit-identical results.
"""
from __future__ import annotations

import math
import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("FLAREKIT_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def _backend(name):
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def bilateral_u8(img: np.ndarray, sigma_spatial: float, sigma_range: float,
                 backend: str | None = None) -> np.ndarray:
    """Per-channel bilateral filter of an 8-bit (H, W, C) image.

    The window half-width is ``ceil(3 * sigma_spatial)``; borders are mirrored.
    """
    radius = max(1, int(math.ceil(3.0 * sigma_spatial)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    spatial = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma_spatial ** 2))
    codes = np.arange(256, dtype=np.float64)
    range_lut = np.exp(-(codes ** 2) / (2.0 * sigma_range ** 2))
    padded = np.pad(img.astype(np.int16), ((radius, radius), (radius, radius), (0, 0)),
                    mode="reflect")
    return _backend(backend).bilateral_u8(np.ascontiguousarray(padded),
                                          np.ascontiguousarray(spatial), range_lut, radius)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, eps: float = 1e-6,
                    backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample a float64 (H, W, C) image at fractional positions (xs, ys).

    Returns the sampled values and a validity mask; positions outside the frame
    (beyond ``eps``) are invalid and read as zero.
    """
    return _backend(backend).bilinear_sample(
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(xs, dtype=np.float64),
        np.ascontiguousarray(ys, dtype=np.float64),
        float(eps),
    )
