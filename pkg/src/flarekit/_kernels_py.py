"""Pure numpy versions of the compiled kernels.

Each function performs the same floating-point operations in the same order as
its counterpart in ``_kernels.pyx`` so both backends return identical arrays.
"""
import numpy as np


def bilateral_u8(padded, spatial, range_lut, radius):
    h = padded.shape[0] - 2 * radius
    w = padded.shape[1] - 2 * radius
    center = padded[radius:radius + h, radius:radius + w].astype(np.int64)
    num = np.zeros(center.shape, dtype=np.float64)
    den = np.zeros(center.shape, dtype=np.float64)
    size = 2 * radius + 1
    for dy in range(size):
        for dx in range(size):
            v = padded[dy:dy + h, dx:dx + w].astype(np.int64)
            wgt = spatial[dy, dx] * range_lut[np.abs(v - center)]
            num = num + wgt * v
            den = den + wgt
    return np.floor(num / den + 0.5).astype(np.uint8)


def bilinear_sample(img, xs, ys, eps):
    h, w = img.shape[:2]
    xmax, ymax = float(w - 1), float(h - 1)
    valid = (xs >= -eps) & (xs <= xmax + eps) & (ys >= -eps) & (ys <= ymax + eps)
    x = np.clip(xs, 0.0, xmax)
    y = np.clip(ys, 0.0, ymax)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    x1 = x0 + 1 if w > 1 else x0
    y1 = y0 + 1 if h > 1 else y0
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    out = (w00 * img[y0, x0] + w01 * img[y0, x1]
           + w10 * img[y1, x0] + w11 * img[y1, x1])
    out[~valid] = 0.0
    return out, valid
