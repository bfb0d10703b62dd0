"""Image registration.

Translations are estimated on processed RGB images with windowed phase
correlation and applied to raw mosaics only as even, interpolation-free index
shifts. Homographies come from block matching plus a robust DLT fit and are
only ever used to warp RGB or linear images.

Conventions: ``moving`` sampled at ``x - t`` reproduces ``reference`` at ``x``.
A homography ``H`` maps moving-image coordinates to reference coordinates, and
``warp(moving, H)`` resamples ``moving`` into the reference frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from . import kernels
from .detection import LUMA, luminance
from .errors import CfaPhaseError, DegenerateGeometryError, LowConfidenceError
from .isp import RawImage, linearize

DEFAULT_SEARCH = 32
DEFAULT_MIN_CONFIDENCE = 3.0
COARSE_FACTOR = 4
# half-width of the main-peak neighbourhood ignored when looking for a rival peak
PEAK_EXCLUSION = 5
COARSE_MIN_SIZE = 384


@dataclass(frozen=True)
class Translation:
    dx: float
    dy: float
    confidence: float = float("inf")

    def to_dict(self):
        conf = self.confidence if math.isfinite(self.confidence) else None
        return {"type": "translation", "dx": self.dx, "dy": self.dy, "confidence": conf}


@dataclass(frozen=True)
class RawShift:
    ix: int
    iy: int
    residual: tuple[float, float]


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray
    rms: float = 0.0
    n_inliers: int = 0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)) or abs(m[2, 2]) < 1e-12:
            raise DegenerateGeometryError("homography must be a finite 3x3 matrix with H[2,2] != 0")
        m = m / m[2, 2]
        if abs(np.linalg.det(m[:2, :2])) < 1e-8 or np.linalg.cond(m) > 1e8:
            raise DegenerateGeometryError("homography is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix), self.rms, self.n_inliers)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_homography(self.matrix, pts)

    def to_dict(self):
        return {"type": "homography", "matrix": self.matrix.tolist(), "rms": self.rms,
                "n_inliers": self.n_inliers}


def apply_homography(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ m[:, :2].T + m[:, 2]
    return hom[:, :2] / hom[:, 2:3]


def registration_from_dict(d):
    if d is None:
        return None
    if d.get("type") == "homography":
        return Homography(np.asarray(d["matrix"]), d.get("rms", 0.0), d.get("n_inliers", 0))
    conf = d.get("confidence")
    return Translation(d["dx"], d["dy"], float("inf") if conf is None else conf)


# -------------------------------------------------------------- translation

def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return luminance(img) if img.ndim == 3 else img.astype(np.float64)


def _parabolic(cm: float, c0: float, cp: float) -> float:
    den = cm - 2 * c0 + cp
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / den, -0.5, 0.5))


def phase_correlate(reference: np.ndarray, moving: np.ndarray, search: int = DEFAULT_SEARCH):
    """Windowed phase correlation. Returns (dx, dy, confidence).

    The whitened cross-power spectrum is attenuated where it sinks to the
    noise floor (estimated from the highest frequencies), which keeps the peak
    sharp on noisy inputs. Confidence is the ratio of the correlation peak to
    the highest other local maximum outside its 11x11 neighbourhood within the
    search window.
    """
    a, b = _gray(reference), _gray(moving)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    win = np.outer(np.hanning(h), np.hanning(w))
    fa = np.fft.fft2((a - a.mean()) * win)
    fb = np.fft.fft2((b - b.mean()) * win)
    cross = fa * np.conj(fb)
    mag = np.abs(cross)
    fr = np.hypot(np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :])
    noise = float(np.median(mag[fr > 0.35])) if np.any(fr > 0.35) else 0.0
    cross = cross / np.maximum(mag, 1e-12) * (mag / np.maximum(mag + noise, 1e-12))
    corr = np.fft.fftshift(np.real(np.fft.ifft2(cross)))
    cy, cx = h // 2, w // 2
    sy, sx = min(search, cy - 1), min(search, cx - 1)
    roi = corr[cy - sy:cy + sy + 1, cx - sx:cx + sx + 1]
    py, px = np.unravel_index(np.argmax(roi), roi.shape)
    peak = roi[py, px]
    local_max = roi == ndimage.maximum_filter(roi, size=3, mode="nearest")
    masked = np.where(local_max, roi, -np.inf)
    masked[max(0, py - PEAK_EXCLUSION):py + PEAK_EXCLUSION + 1,
           max(0, px - PEAK_EXCLUSION):px + PEAK_EXCLUSION + 1] = -np.inf
    second = masked.max() if np.isfinite(masked.max()) else 0.0
    confidence = float(peak / second) if second > 0 else float("inf")
    gy, gx = py + cy - sy, px + cx - sx
    fy = _parabolic(corr[gy - 1, gx], corr[gy, gx], corr[gy + 1, gx]) if 0 < gy < h - 1 else 0.0
    fx = _parabolic(corr[gy, gx - 1], corr[gy, gx], corr[gy, gx + 1]) if 0 < gx < w - 1 else 0.0
    return gx - cx + fx, gy - cy + fy, confidence


def refine_translation(reference: np.ndarray, moving: np.ndarray, dx: float, dy: float,
                       iterations: int = 4, margin: int | None = None):
    """Gradient-based (Lucas-Kanade) refinement of a translation estimate."""
    a, b = _gray(reference), _gray(moving)
    h, w = a.shape
    if margin is None:
        margin = int(min(h, w) * 0.08) + int(math.ceil(max(abs(dx), abs(dy)))) + 2
    if 2 * margin + 8 >= min(h, w):
        return dx, dy
    ys, xs = np.mgrid[margin:h - margin, margin:w - margin].astype(np.float64)
    ref = a[margin:h - margin, margin:w - margin]
    gy, gx = np.gradient(a)
    gx = gx[margin:h - margin, margin:w - margin].ravel()
    gy = gy[margin:h - margin, margin:w - margin].ravel()
    normal = np.array([[gx @ gx, gx @ gy], [gx @ gy, gy @ gy]])
    if np.linalg.cond(normal) > 1e6:
        return dx, dy
    coeffs = ndimage.spline_filter(b, order=3)
    for _ in range(iterations):
        warped = ndimage.map_coordinates(coeffs, [ys - dy, xs - dx], order=3, prefilter=False)
        err = (warped - ref).ravel()
        delta = np.linalg.solve(normal, np.array([gx @ err, gy @ err]))
        dx, dy = dx + delta[0], dy + delta[1]
        if np.hypot(*delta) < 1e-4:
            break
    return float(dx), float(dy)


def _registration_plane(img: np.ndarray, domain: str) -> np.ndarray:
    if domain == "encoded":
        return _gray(img)
    if domain == "linear":
        img = np.asarray(img)
        return linearize(img) @ LUMA if img.ndim == 3 else linearize(img)
    raise ValueError(f"domain must be 'encoded' or 'linear', got {domain!r}")


def estimate_translation(reference: np.ndarray, moving: np.ndarray, search: int = DEFAULT_SEARCH,
                         min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                         refine: bool = True, domain: str = "encoded") -> Translation:
    """Sub-pixel translation (dx, dy) such that shifting ``moving`` by it aligns to ``reference``.

    ``domain="linear"`` correlates linear-light luminance instead of code
    values, which holds up better on dark, noisy frames.
    """
    if np.shape(reference) != np.shape(moving):
        raise ValueError("reference and moving must have equal dimensions")
    reference = _registration_plane(reference, domain)
    moving = _registration_plane(moving, domain)
    dx, dy, conf = phase_correlate(reference, moving, search)
    if conf < min_confidence:
        raise LowConfidenceError(f"phase correlation peak ratio {conf:.2f} < {min_confidence}", conf)
    if refine:
        rdx, rdy = refine_translation(reference, moving, dx, dy)
        # refinement must stay in the basin the phase correlation found
        if abs(rdx - dx) <= 1.0 and abs(rdy - dy) <= 1.0:
            dx, dy = rdx, rdy
    if abs(dx) > search or abs(dy) > search:
        raise LowConfidenceError("translation exceeds search bound", conf)
    return Translation(float(dx), float(dy), conf)


def _round_even(v: float) -> int:
    half = v / 2.0
    # ties away from zero
    return int(2 * math.copysign(math.floor(abs(half) + 0.5), half))


def quantize_translation_for_raw(t: Translation) -> RawShift:
    """Nearest even integer shift (keeps the CFA phase); ties round away from zero."""
    ix, iy = _round_even(t.dx), _round_even(t.dy)
    return RawShift(ix, iy, (t.dx - ix, t.dy - iy))


def shift_raw(raw: RawImage, ix: int, iy: int) -> tuple[RawImage, np.ndarray]:
    """Pure index shift: new[y + iy, x + ix] = old[y, x].

    Vacated pixels are filled with the black level and flagged invalid in the
    returned mask.
    """
    if ix % 2 or iy % 2:
        raise CfaPhaseError(f"raw shifts must be even to keep the CFA phase, got ({ix}, {iy})")
    h, w = raw.height, raw.width
    out = raw.black_level_map().astype(np.uint16)
    valid = np.zeros((h, w), dtype=bool)
    ys_dst = slice(max(0, iy), min(h, h + iy))
    xs_dst = slice(max(0, ix), min(w, w + ix))
    ys_src = slice(max(0, -iy), min(h, h - iy))
    xs_src = slice(max(0, -ix), min(w, w - ix))
    if ys_dst.start < ys_dst.stop and xs_dst.start < xs_dst.stop:
        out[ys_dst, xs_dst] = raw.pixels[ys_src, xs_src]
        valid[ys_dst, xs_dst] = True
    return RawImage(out, raw.meta), valid


def shift_image(img: np.ndarray, ix: int, iy: int, fill=0):
    """Integer index shift of an RGB image with the same convention as shift_raw."""
    h, w = img.shape[:2]
    out = np.full_like(img, fill)
    valid = np.zeros((h, w), dtype=bool)
    ys_dst = slice(max(0, iy), min(h, h + iy))
    xs_dst = slice(max(0, ix), min(w, w + ix))
    ys_src = slice(max(0, -iy), min(h, h - iy))
    xs_src = slice(max(0, -ix), min(w, w - ix))
    if ys_dst.start < ys_dst.stop and xs_dst.start < xs_dst.stop:
        out[ys_dst, xs_dst] = img[ys_src, xs_src]
        valid[ys_dst, xs_dst] = True
    return out, valid


def resample_translate(img: np.ndarray, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear sampling of ``img`` at (x + dx, y + dy)."""
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = np.asarray(img, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    out, valid = kernels.bilinear_sample(src, xs + dx, ys + dy)
    return (out[..., 0] if squeeze else out), valid


# --------------------------------------------------------------- homography

def _normalize(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return apply_homography(t, pts), t


def _check_geometry(src: np.ndarray, dst: np.ndarray):
    if len(src) < 4:
        raise DegenerateGeometryError(f"need at least 4 correspondences, got {len(src)}")
    for pts in (src, dst):
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[1] < 1e-6 * max(sv[0], 1e-12) or sv[1] < 1e-9:
            raise DegenerateGeometryError("correspondences are collinear")


def fit_homography(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted normalized direct linear transform: dst ~ H src."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if weights is not None:
        keep = weights > 0
        _check_geometry(src[keep], dst[keep])
    else:
        _check_geometry(src, dst)
    ns, ts = _normalize(src)
    nd, td = _normalize(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    a[0::2, 0:3] = np.stack([-x, -y, -np.ones(n)], axis=1)
    a[0::2, 6:9] = np.stack([u * x, u * y, u], axis=1)
    a[1::2, 3:6] = np.stack([-x, -y, -np.ones(n)], axis=1)
    a[1::2, 6:9] = np.stack([v * x, v * y, v], axis=1)
    if weights is not None:
        a *= np.repeat(np.sqrt(weights), 2)[:, None]
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    if abs(m[2, 2]) < 1e-12:
        raise DegenerateGeometryError("homography fit is degenerate")
    return m / m[2, 2]


def robust_fit_homography(src: np.ndarray, dst: np.ndarray, iterations: int = 20,
                          min_scale: float = 0.25, max_inlier_px: float = 2.0):
    """IRLS with Huber then Tukey weights. Returns (matrix, residuals, inlier mask)."""
    weights = np.ones(len(src))
    m = fit_homography(src, dst)
    for it in range(iterations):
        res = np.linalg.norm(apply_homography(m, src) - dst, axis=1)
        scale = max(1.4826 * np.median(res), min_scale)
        if it < iterations // 2:
            k = 1.345 * scale
            weights = np.where(res <= k, 1.0, k / np.maximum(res, 1e-12))
        else:
            c = 4.685 * scale
            weights = np.where(res < c, (1 - (res / c) ** 2) ** 2, 0.0)
        if np.count_nonzero(weights) < 4:
            break
        m = fit_homography(src, dst, weights)
    res = np.linalg.norm(apply_homography(m, src) - dst, axis=1)
    scale = max(1.4826 * np.median(res), min_scale)
    inliers = res < min(3.0 * scale, max_inlier_px)
    return m, res, inliers


def _ncc_neighbourhood(win: np.ndarray, tpl: np.ndarray, mx: int, my: int) -> np.ndarray:
    th, tw = tpl.shape
    t = tpl.astype(np.float64)
    t = t - t.mean()
    tn = np.sqrt((t * t).sum())
    out = np.zeros((3, 3))
    for j in range(3):
        for i in range(3):
            p = win[my + j - 1:my + j - 1 + th, mx + i - 1:mx + i - 1 + tw].astype(np.float64)
            p = p - p.mean()
            den = tn * np.sqrt((p * p).sum())
            out[j, i] = (t * p).sum() / den if den > 0 else 0.0
    return out


def match_blocks(reference: np.ndarray, moving: np.ndarray, block: int = 32, spacing: int = 48,
                 search: int = 24, offset=(0.0, 0.0), prior: np.ndarray | None = None,
                 min_ncc: float = 0.8, min_std: float = 2.0):
    """NCC block matching. Returns (moving_points, reference_points, scores).

    Each reference block is searched for in ``moving`` around ``p - offset``,
    or around ``prior^-1 p`` when a moving-to-reference ``prior`` is given.
    """
    a = _gray(reference).astype(np.float32)
    b = _gray(moving).astype(np.float32)
    h, w = a.shape
    half = block // 2
    ox, oy = offset
    prior_inv = np.linalg.inv(prior) if prior is not None else None
    src, dst, scores = [], [], []
    margin = half + 1
    for cy in range(margin, h - margin, spacing):
        for cx in range(margin, w - margin, spacing):
            tpl = a[cy - half:cy + half + 1, cx - half:cx + half + 1]
            if tpl.std() < min_std:
                continue
            # reference content at p appears in moving near p - offset
            if prior_inv is not None:
                (qx0, qy0), = apply_homography(prior_inv, np.array([[cx, cy]], dtype=np.float64))
                px, py = int(round(qx0)), int(round(qy0))
            else:
                px, py = int(round(cx - ox)), int(round(cy - oy))
            x0, x1 = px - half - search, px + half + search + 1
            y0, y1 = py - half - search, py + half + search + 1
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                continue
            win = b[y0:y1, x0:x1]
            if win.std() < min_std:
                continue
            ncc = cv2.matchTemplate(win, tpl, cv2.TM_CCOEFF_NORMED)
            my, mx = np.unravel_index(np.argmax(ncc), ncc.shape)
            peak = float(ncc[my, mx])
            if peak < min_ncc or not (0 < mx < ncc.shape[1] - 1 and 0 < my < ncc.shape[0] - 1):
                continue
            # cv2 accumulates in float32; redo the 3x3 neighbourhood exactly
            local = _ncc_neighbourhood(win, tpl, mx, my)
            if local[1, 1] >= 1.0 - 1e-9:
                fx = fy = 0.0
            else:
                fx = _parabolic(local[1, 0], local[1, 1], local[1, 2])
                fy = _parabolic(local[0, 1], local[1, 1], local[2, 1])
            qx = x0 + mx + fx + half
            qy = y0 + my + fy + half
            src.append((qx, qy))
            dst.append((float(cx), float(cy)))
            scores.append(peak)
    return np.array(src).reshape(-1, 2), np.array(dst).reshape(-1, 2), np.array(scores)


def estimate_homography(reference: np.ndarray, moving: np.ndarray, block: int = 32,
                        spacing: int | None = None, search: int = 24,
                        min_matches: int = 8) -> Homography:
    """Homography mapping ``moving`` coordinates onto ``reference`` coordinates."""
    if np.shape(reference) != np.shape(moving):
        raise ValueError("reference and moving must have equal dimensions")
    h, w = np.shape(reference)[:2]
    if spacing is None:
        spacing = max(24, min(h, w) // 16)
    prior = None
    if min(h, w) >= COARSE_MIN_SIZE:
        # coarse pass at quarter resolution predicts where each block moved
        f = COARSE_FACTOR
        small = [cv2.resize(np.asarray(im, dtype=np.float32), (w // f, h // f),
                            interpolation=cv2.INTER_AREA) for im in (reference, moving)]
        try:
            coarse = estimate_homography(small[0], small[1], block=block, search=search,
                                         min_matches=min_matches)
            scale = np.diag([float(f), float(f), 1.0])
            # pixel centres: x_full = f * x_small + (f - 1) / 2
            scale[:2, 2] = (f - 1) / 2.0
            prior = scale @ coarse.matrix @ np.linalg.inv(scale)
        except DegenerateGeometryError:
            prior = None
    if prior is None:
        dx, dy, conf = phase_correlate(reference, moving, search=min(64, min(h, w) // 4))
        offset = (dx, dy) if conf >= 2.0 else (0.0, 0.0)
    else:
        offset = (0.0, 0.0)
    src, dst, _ = match_blocks(reference, moving, block=block, spacing=spacing, search=search,
                               offset=offset, prior=prior)
    if len(src) < min_matches:
        raise DegenerateGeometryError(f"only {len(src)} reliable block matches")
    m, res, inliers = robust_fit_homography(src, dst)
    if inliers.sum() < max(min_matches, int(0.3 * len(src))):
        raise DegenerateGeometryError(f"only {int(inliers.sum())} of {len(src)} matches are consistent")
    _check_geometry(src[inliers], dst[inliers])
    m = fit_homography(src[inliers], dst[inliers])
    res = np.linalg.norm(apply_homography(m, src[inliers]) - dst[inliers], axis=1)
    rms = float(np.sqrt(np.mean(res ** 2)))
    return Homography(m, rms, int(inliers.sum()))


def warp(img: np.ndarray, h: Homography, output_shape: tuple[int, int] | None = None):
    """Inverse-mapped bilinear warp. Returns (image, validity mask).

    Output pixels whose source falls outside the input frame are flagged
    invalid and set to zero.
    """
    img = np.asarray(img)
    ho, wo = output_shape if output_shape is not None else img.shape[:2]
    inv = np.linalg.inv(h.matrix)
    ys, xs = np.mgrid[0:ho, 0:wo].astype(np.float64)
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    src = img.astype(np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    out, valid = kernels.bilinear_sample(src, sx, sy)
    if squeeze:
        out = out[..., 0]
    if img.dtype == np.uint8:
        out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out, valid
