"""Pluggable flare-removal stage.

Every remover predicts a non-negative flare image and subtracts it from the
input; no light-source blending is applied afterwards.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .detection import DEFAULT_LUM_THRESHOLD, LUMA, detect_light_sources
from .errors import ConfigurationError
from .isp import as_encoded, linearize, tone_map

REMOVER_KINDS = ("identity", "oracle", "baseline")


@dataclass(frozen=True, eq=False)
class RemovalResult:
    clean_estimate: np.ndarray
    flare_estimate: np.ndarray


def _subtract(img: np.ndarray, flare_codes: np.ndarray) -> RemovalResult:
    flare = np.clip(flare_codes, 0, 255).astype(np.uint8)
    clean = np.clip(img.astype(np.int16) - flare, 0, 255).astype(np.uint8)
    return RemovalResult(clean, flare)


def _encode_linear_estimate(img: np.ndarray, flare_linear: np.ndarray) -> RemovalResult:
    """Express a linear-light flare estimate as code values to subtract from ``img``.

    Clipped pixels (code 255) carry no recoverable information and are left alone.
    """
    lin = linearize(img)
    target = tone_map(np.maximum(lin - flare_linear, 0.0))
    flare = img.astype(np.int16) - target.astype(np.int16)
    flare[img == 255] = 0
    return _subtract(img, flare)


def remove_identity(img: np.ndarray) -> RemovalResult:
    img = as_encoded(img)
    return RemovalResult(img.copy(), np.zeros_like(img))


def remove_oracle(img: np.ndarray, truth_flare_layer: np.ndarray) -> RemovalResult:
    """Subtract the known linear flare layer, rendered into the tone domain."""
    img = as_encoded(img)
    layer = np.asarray(truth_flare_layer, dtype=np.float64)
    if layer.shape != img.shape:
        raise ConfigurationError(f"flare layer shape {layer.shape} does not match image {img.shape}")
    return _encode_linear_estimate(img, layer)


@dataclass(frozen=True)
class BaselineParams:
    source_exclusion_radius: float | None = None  # None: derived from each source's size
    glare_kernel_sigma: float = 12.0
    streak_suppression: bool = False
    opening_radius: int = 31
    min_amplitude: float = 0.004  # linear units; weaker fits are treated as noise
    lum_threshold: float = DEFAULT_LUM_THRESHOLD
    min_area: int = 20
    streak_length: int = 31
    ring_quantile: float = 0.2
    min_explained: float = 0.8
    sectors: int = 8
    sector_outliers: int = 0  # sectors allowed to miss the glare (texture, occluders)


def _ring_profile(values: np.ndarray, radii: np.ndarray, r0: float, r1: float, q: float):
    """Per-channel ``q``-quantile of ``values`` (N, C) in 1-px rings r0 <= r < r1.

    A low quantile follows light added to the whole ring (glare) while
    ignoring texture that only brightens part of it.
    """
    sel = (radii >= r0) & (radii < r1)
    bins = np.floor(radii[sel] - r0).astype(int)
    vals = values[sel]
    idx, start, counts = np.unique(bins, return_index=True, return_counts=True)
    if idx.size < 4:
        return None, None
    order = np.argsort(bins, kind="stable")
    vals = vals[order]
    prof = np.empty((idx.size, vals.shape[1]))
    for k, (s0, n) in enumerate(zip(np.cumsum(np.r_[0, counts[:-1]]), counts)):
        prof[k] = np.quantile(vals[s0:s0 + n], q, axis=0)
    return r0 + idx + 0.5, prof


def _glare_shape(r: np.ndarray, r0: float, sigma: float) -> np.ndarray:
    """Gaussian fall-off anchored at the inner fit radius; flat inside it."""
    r = np.maximum(r, r0)
    return np.exp(-(r ** 2 - r0 ** 2) / (2 * sigma * sigma))


def _fit_radial_gaussian(r: np.ndarray, prof: np.ndarray, r0: float, sigmas):
    """Least squares for prof ~ A * shape(r) + c over a grid of sigmas."""
    best = None
    for s in sigmas:
        design = np.stack([_glare_shape(r, r0, s), np.ones_like(r)], axis=1)
        coef, *_ = np.linalg.lstsq(design, prof, rcond=None)
        resid = prof - design @ coef
        sse = float(np.sum(resid ** 2))
        if best is None or sse < best[0]:
            best = (sse, s, coef, resid)
    return best


def _line_footprint(length: int, angle: float) -> np.ndarray:
    r = length // 2
    fp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    t = np.linspace(-r, r, 4 * length)
    xs = np.round(r + t * np.cos(angle)).astype(int)
    ys = np.round(r + t * np.sin(angle)).astype(int)
    fp[ys, xs] = True
    return fp


def estimate_baseline_flare(lin: np.ndarray, sources, params: BaselineParams) -> np.ndarray:
    """Linear-light flare estimate: radial Gaussian glare per source plus optional streaks."""
    h, w = lin.shape[:2]
    size = 2 * params.opening_radius + 1
    background = np.stack([ndimage.grey_opening(lin[..., c], size=(size, size), mode="reflect")
                           for c in range(3)], axis=2)
    excess = np.maximum(lin - background, 0.0)
    flare = np.zeros_like(lin)
    ys, xs = np.mgrid[0:h, 0:w]
    sigma0 = params.glare_kernel_sigma
    sigmas = sigma0 * np.array([0.5, 0.7, 1.0, 1.4])
    fit_regions = []
    for src in sources:
        cx, cy = src.centroid
        r_ex = params.source_exclusion_radius
        if r_ex is None:
            r_ex = 1.2 * src.radius + 3.0
        r_out = r_ex + 4.0 * sigma0
        x0, x1 = max(0, int(cx - r_out)), min(w, int(cx + r_out) + 1)
        y0, y1 = max(0, int(cy - r_out)), min(h, int(cy + r_out) + 1)
        dx, dy = xs[y0:y1, x0:x1] - cx, ys[y0:y1, x0:x1] - cy
        radii = np.hypot(dx, dy)
        local = excess[y0:y1, x0:x1].reshape(-1, 3)
        r, prof = _ring_profile(local, radii.ravel(), r_ex, r_out, params.ring_quantile)
        if r is None:
            continue
        lum_prof = prof @ LUMA
        sse, s, coef, resid = _fit_radial_gaussian(r, lum_prof, r_ex, sigmas)
        total = float(np.sum((lum_prof - lum_prof.mean()) ** 2))
        explained = 1.0 - sse / total if total > 0 else 0.0
        if coef[0] <= max(params.min_amplitude, 3.0 * float(np.std(resid))) or explained < params.min_explained:
            continue
        # glare is isotropic: it must show up in every angular sector
        sector = np.floor((np.arctan2(dy, dx).ravel() + np.pi) / (2 * np.pi) * params.sectors).astype(int)
        sector = np.minimum(sector, params.sectors - 1)
        amps = []
        for k in range(params.sectors):
            sel = sector == k
            rk, pk = _ring_profile(local[sel] @ LUMA[:, None], radii.ravel()[sel], r_ex, r_out,
                                   params.ring_quantile)
            if rk is None:
                amps.append(0.0)
                continue
            design = np.stack([_glare_shape(rk, r_ex, s), np.ones_like(rk)], axis=1)
            ck, *_ = np.linalg.lstsq(design, pk[:, 0], rcond=None)
            amps.append(ck[0])
        amp = sorted(amps)[min(params.sector_outliers, len(amps) - 1)]
        if amp <= params.min_amplitude:
            continue
        design = np.stack([_glare_shape(r, r_ex, s), np.ones_like(r)], axis=1)
        chan, *_ = np.linalg.lstsq(design, prof, rcond=None)
        chan_amps = np.maximum(chan[0], 0.0) * min(1.0, amp / coef[0])
        flare[y0:y1, x0:x1] += _glare_shape(radii, r_ex, s)[..., None] * chan_amps
        fit_regions.append((y0, y1, x0, x1, radii, r_ex, r_out))
    if params.streak_suppression and fit_regions:
        residual = np.maximum(excess - flare, 0.0)
        angles = np.arange(0, np.pi, np.pi / 12)
        footprints = [_line_footprint(params.streak_length, a) for a in angles]
        for y0, y1, x0, x1, radii, r_ex, r_out in fit_regions:
            region = (radii >= r_ex) & (radii < r_out)
            for c in range(3):
                local = residual[y0:y1, x0:x1, c]
                resp = np.max([ndimage.median_filter(local, footprint=fp, mode="constant")
                               for fp in footprints], axis=0)
                streak = np.minimum(resp, local) * region
                flare[y0:y1, x0:x1, c] += streak
    return flare


def remove_baseline(img: np.ndarray, params: BaselineParams | None = None) -> RemovalResult:
    """Classical estimator: detect sources, fit smooth glare, subtract."""
    img = as_encoded(img)
    params = params or BaselineParams()
    sources = detect_light_sources(img, lum_threshold=params.lum_threshold, min_area=params.min_area)
    if not sources:
        return remove_identity(img)
    flare = estimate_baseline_flare(linearize(img), sources, params)
    return _encode_linear_estimate(img, flare)


@dataclass(frozen=True, eq=False)
class FlareRemover:
    """Remover handle used by the pipeline's flare_removal stage."""

    kind: str = "identity"
    params: BaselineParams = field(default_factory=BaselineParams)
    truth_layer: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in REMOVER_KINDS:
            raise ConfigurationError(f"unknown remover kind {self.kind!r}")

    def with_truth(self, layer: np.ndarray) -> "FlareRemover":
        return FlareRemover(self.kind, self.params, np.asarray(layer, dtype=np.float64))

    def _require_truth(self):
        if self.truth_layer is None:
            raise ConfigurationError("oracle remover needs a ground-truth flare layer")
        return self.truth_layer

    def remove(self, img: np.ndarray) -> RemovalResult:
        if self.kind == "identity":
            return remove_identity(img)
        if self.kind == "oracle":
            return remove_oracle(img, self._require_truth())
        return remove_baseline(img, self.params)

    def remove_linear(self, lin: np.ndarray) -> np.ndarray:
        """Linear-domain variant: returns the linear clean estimate."""
        lin = np.asarray(lin, dtype=np.float64)
        clipped = lin >= 1.0
        if self.kind == "identity":
            return lin.copy()
        if self.kind == "oracle":
            est = self._require_truth()
        else:
            sources = detect_light_sources(tone_map(lin), lum_threshold=self.params.lum_threshold,
                                           min_area=self.params.min_area)
            if not sources:
                return lin.copy()
            est = estimate_baseline_flare(lin, sources, self.params)
        return np.where(clipped, lin, np.maximum(lin - est, 0.0))

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "baseline":
            d["params"] = asdict(self.params)
        return d


def make_remover(kind: str, truth_layer: np.ndarray | None = None, **params) -> FlareRemover:
    return FlareRemover(kind, BaselineParams(**params), truth_layer)
