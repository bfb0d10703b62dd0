# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Mirrors flarekit._kernels_py operation for operation."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def bilateral_u8(const cnp.int16_t[:, :, ::1] padded,
                 const double[:, ::1] spatial,
                 const double[::1] range_lut,
                 int radius):
    cdef Py_ssize_t hp = padded.shape[0], wp = padded.shape[1], nc = padded.shape[2]
    cdef Py_ssize_t h = hp - 2 * radius, w = wp - 2 * radius
    cdef Py_ssize_t size = 2 * radius + 1
    # channel-major planes keep the window reads contiguous
    planes_arr = np.ascontiguousarray(np.moveaxis(np.asarray(padded), 2, 0))
    cdef const cnp.int16_t[:, :, ::1] planes = planes_arr
    out_arr = np.empty((h, w, nc), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t y, x, c, dy, dx
    cdef int center, v, d
    cdef double num, den, wgt
    cdef const cnp.int16_t* row
    cdef const double* srow
    with nogil:
        for c in range(nc):
            for y in range(h):
                for x in range(w):
                    center = planes[c, y + radius, x + radius]
                    num = 0.0
                    den = 0.0
                    for dy in range(size):
                        row = &planes[c, y + dy, x]
                        srow = &spatial[dy, 0]
                        for dx in range(size):
                            v = row[dx]
                            d = v - center
                            if d < 0:
                                d = -d
                            wgt = srow[dx] * range_lut[d]
                            num = num + wgt * v
                            den = den + wgt
                    out[y, x, c] = <cnp.uint8_t>floor(num / den + 0.5)
    return out_arr


def bilinear_sample(const double[:, :, ::1] img,
                    const double[:, ::1] xs,
                    const double[:, ::1] ys,
                    double eps):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], nc = img.shape[2]
    cdef Py_ssize_t ho = xs.shape[0], wo = xs.shape[1]
    out_arr = np.zeros((ho, wo, nc), dtype=np.float64)
    valid_arr = np.zeros((ho, wo), dtype=np.bool_)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.npy_bool[:, ::1] valid = valid_arr
    cdef Py_ssize_t i, j, c, x0, y0, x1, y1
    cdef double x, y, fx, fy, w00, w01, w10, w11
    cdef double xmax = <double>(w - 1), ymax = <double>(h - 1)
    with nogil:
        for i in range(ho):
            for j in range(wo):
                x = xs[i, j]
                y = ys[i, j]
                if not (x >= -eps and x <= xmax + eps and y >= -eps and y <= ymax + eps):
                    continue
                valid[i, j] = 1
                if x < 0.0:
                    x = 0.0
                elif x > xmax:
                    x = xmax
                if y < 0.0:
                    y = 0.0
                elif y > ymax:
                    y = ymax
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                if x0 > w - 2:
                    x0 = w - 2
                if x0 < 0:
                    x0 = 0
                if y0 > h - 2:
                    y0 = h - 2
                if y0 < 0:
                    y0 = 0
                x1 = x0 + 1 if w > 1 else x0
                y1 = y0 + 1 if h > 1 else y0
                fx = x - x0
                fy = y - y0
                w00 = (1.0 - fx) * (1.0 - fy)
                w01 = fx * (1.0 - fy)
                w10 = (1.0 - fx) * fy
                w11 = fx * fy
                for c in range(nc):
                    out[i, j, c] = (w00 * img[y0, x0, c] + w01 * img[y0, x1, c]
                                    + w10 * img[y1, x0, c] + w11 * img[y1, x1, c])
    return out_arr, valid_arr
