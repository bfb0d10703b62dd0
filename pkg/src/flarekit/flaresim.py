"""Synthetic scenes and scattering / reflective flare in linear light.

Flare is always composed additively on linear RGB, before any tone mapping,
and every generated pair carries the exact additive flare layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage, signal

from .errors import ConfigurationError, InvalidMetadataError
from .isp import RawImage, RawMetadata, cfa_index_image

# Mild camera-to-sRGB matrix (rows sum to 1) used for synthetic captures.
SYNTH_COLOR_MATRIX = ((1.30, -0.20, -0.10),
                      (-0.12, 1.28, -0.16),
                      (0.02, -0.30, 1.28))
SYNTH_METADATA = RawMetadata(cfa="RGGB", bit_depth=12, black_level=(256, 256, 256, 256),
                             white_level=4095, wb_gains=(1.9, 1.0, 1.5),
                             color_matrix=SYNTH_COLOR_MATRIX)

SATURATION = 1.0


@dataclass(frozen=True)
class LightSourceSpec:
    center: tuple[float, float]
    radius: float
    intensity: float = 2.0


@dataclass(frozen=True)
class SceneSpec:
    """Procedural scene: smooth textured background in [0, 0.5) plus saturated disks.

    ``brightness`` scales the background (night scenes use a low value).
    """

    width: int
    height: int
    sources: tuple[LightSourceSpec, ...] = ()
    seed: int = 0
    brightness: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(
            s if isinstance(s, LightSourceSpec) else LightSourceSpec(**s) for s in self.sources))
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("scene size must be positive")
        if not 0 < self.brightness <= 1:
            raise ConfigurationError("brightness must be in (0, 1]")
        for s in self.sources:
            x, y = s.center
            if s.radius <= 0:
                raise ConfigurationError("source radius must be > 0")
            if s.intensity < 1:
                raise ConfigurationError("source intensity must be >= 1")
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ConfigurationError(f"source center {s.center} outside frame")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["sources"] = [asdict(s) for s in self.sources]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        d = dict(d)
        d["sources"] = tuple(LightSourceSpec(center=tuple(s["center"]), radius=s["radius"],
                                             intensity=s["intensity"]) for s in d.get("sources", ()))
        return cls(**d)


@dataclass(frozen=True)
class ScatteringParams:
    glare_sigma: float = 12.0
    glare_gain: float = 0.0
    streak_count: int = 0
    streak_angle: float = 0.0
    streak_length: float = 80.0
    streak_gain: float = 0.0
    veiling: float = 0.0


@dataclass(frozen=True)
class ReflectiveParams:
    optical_center: tuple[float, float] = (0.0, 0.0)
    ghost_gain: float = 0.2
    defocus_radius: float = 0.0


@dataclass(frozen=True)
class FlareSpec:
    kind: str
    scattering: ScatteringParams = field(default_factory=ScatteringParams)
    reflective: ReflectiveParams = field(default_factory=ReflectiveParams)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("scattering", "reflective"):
            raise ConfigurationError(f"unknown flare kind {self.kind!r}")
        if isinstance(self.scattering, dict):
            object.__setattr__(self, "scattering", ScatteringParams(**self.scattering))
        if isinstance(self.reflective, dict):
            r = dict(self.reflective)
            r["optical_center"] = tuple(r.get("optical_center", (0.0, 0.0)))
            object.__setattr__(self, "reflective", ReflectiveParams(**r))
        sc, rf = self.scattering, self.reflective
        for name in ("glare_gain", "streak_gain", "veiling"):
            v = getattr(sc, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0")
        if sc.glare_sigma <= 0:
            raise ConfigurationError("glare_sigma must be > 0")
        if sc.streak_count < 0:
            raise ConfigurationError("streak_count must be >= 0")
        if sc.streak_count and sc.streak_gain > 0 and sc.streak_length < 20:
            raise ConfigurationError("streak_length must be >= 20 px")
        if not 0 <= rf.ghost_gain <= 1:
            raise ConfigurationError("ghost_gain must be in [0, 1]")
        if rf.defocus_radius < 0:
            raise ConfigurationError("defocus_radius must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FlareSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(eq=False)
class FlarePair:
    clean: np.ndarray
    corrupted: np.ndarray
    flare_layer: np.ndarray
    spec: FlareSpec


# -------------------------------------------------------------------- scene

def _background_params(seed: int, brightness: float):
    rng = np.random.default_rng([seed, 0x5CE7E])
    n_waves = 24
    waves = {
        "freq": 1.0 / rng.uniform(10.0, 90.0, n_waves),
        "theta": rng.uniform(0, np.pi, n_waves),
        "phase": rng.uniform(0, 2 * np.pi, n_waves),
        "amp": rng.uniform(0.3, 1.0, n_waves),
        "mix": rng.uniform(0.4, 1.0, (n_waves, 3)),
    }
    n_blobs = 16
    blobs = {
        "pos": rng.uniform(0.0, 1.0, (n_blobs, 2)),
        "radius": rng.uniform(12.0, 70.0, n_blobs),
        "amp": rng.uniform(-1.0, 1.0, n_blobs),
        "mix": rng.uniform(0.4, 1.0, (n_blobs, 3)),
    }
    base = rng.uniform(0.02, 0.06, 3) * brightness
    span = rng.uniform(0.30, 0.40, 3) * brightness
    grad = rng.uniform(-1.0, 1.0, (2, 3))
    return waves, blobs, base, span, grad


def _render_background(spec: SceneSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    waves, blobs, base, span, grad = _background_params(spec.seed, spec.brightness)
    h, w = xs.shape
    field_ = np.zeros((h, w, 3))
    power = np.zeros(3)
    for f, th, ph, a, mix in zip(waves["freq"], waves["theta"], waves["phase"], waves["amp"], waves["mix"]):
        arg = 2 * np.pi * f * (xs * np.cos(th) + ys * np.sin(th)) + ph
        field_ += (a * np.sin(arg))[..., None] * mix
        power += 0.5 * (a * mix) ** 2
    size = float(max(spec.width, spec.height))
    for (px, py), r, a, mix in zip(blobs["pos"], blobs["radius"], blobs["amp"], blobs["mix"]):
        d2 = (xs - px * spec.width) ** 2 + (ys - py * spec.height) ** 2
        field_ += (2.0 * a * np.exp(-d2 / (2 * r * r)))[..., None] * mix
    gx = (xs / size - 0.5)[..., None] * grad[0]
    gy = (ys / size - 0.5)[..., None] * grad[1]
    # squash to (-1, 1) using the expected spread of the wave sum
    field_ = np.tanh(1.2 * field_ / np.sqrt(power) + gx + gy)
    return base + span * 0.5 * (field_ + 1.0)


def synth_scene(spec: SceneSpec, view: np.ndarray | None = None) -> np.ndarray:
    """Render a linear RGB scene.

    ``view`` is an optional 3x3 homography taking scene coordinates to image
    coordinates (e.g. a small camera rotation); the procedural scene is
    evaluated exactly at the back-projected pixel positions.
    """
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    if view is not None:
        inv = np.linalg.inv(np.asarray(view, dtype=np.float64))
        den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
        sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
        sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    else:
        sx, sy = xs, ys
    img = _render_background(spec, sx, sy)
    for s in spec.sources:
        d = np.hypot(sx - s.center[0], sy - s.center[1])
        cov = np.clip(s.radius + 0.5 - d, 0.0, 1.0)[..., None]
        img = img * (1.0 - cov) + s.intensity * cov
    return img


# -------------------------------------------------------------------- flare

def source_excess(clean: np.ndarray) -> np.ndarray:
    """Over-unity light: pixels at or above saturation keep their full intensity."""
    sat = clean.max(axis=2) >= SATURATION
    return np.where(sat[..., None], clean, 0.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(4 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def streak_kernel(length: float, angle: float) -> np.ndarray:
    """Oriented anisotropic Gaussian (aspect >= 8:1) with unit sum."""
    s_long = length / 4.0
    s_short = max(s_long / 10.0, 0.6)
    r = int(math.ceil(3 * s_long))
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    u = xs * math.cos(angle) + ys * math.sin(angle)
    v = -xs * math.sin(angle) + ys * math.cos(angle)
    k = np.exp(-0.5 * ((u / s_long) ** 2 + (v / s_short) ** 2))
    return k / k.sum()


def disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xs * xs + ys * ys <= radius * radius).astype(np.float64)
    return k / k.sum()


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.stack([signal.fftconvolve(img[..., c], kernel, mode="same") for c in range(img.shape[2])],
                   axis=2)
    return np.maximum(out, 0.0)


def _compose(clean: np.ndarray, flare: np.ndarray, spec: FlareSpec) -> FlarePair:
    corrupted = np.clip(clean + flare, 0.0, SATURATION)
    return FlarePair(clean=clean, corrupted=corrupted, flare_layer=flare, spec=spec)


def apply_scattering_flare(clean: np.ndarray, spec: FlareSpec) -> FlarePair:
    if spec.kind != "scattering":
        raise ConfigurationError(f"expected a scattering spec, got {spec.kind!r}")
    p = spec.scattering
    clean = np.asarray(clean, dtype=np.float64)
    flare = np.zeros_like(clean)
    src = source_excess(clean)
    if p.glare_gain > 0 and src.any():
        flare += p.glare_gain * _convolve(src, gaussian_kernel(p.glare_sigma))
    if p.streak_gain > 0 and p.streak_count > 0 and src.any():
        for k in range(p.streak_count):
            angle = p.streak_angle + k * math.pi / p.streak_count
            flare += p.streak_gain * _convolve(src, streak_kernel(p.streak_length, angle))
    if p.veiling > 0:
        flare += p.veiling
    return _compose(clean, flare, spec)


def mirror_about(img: np.ndarray, center: tuple[float, float]) -> np.ndarray:
    """Point reflection img'(x) = img(2c - x); out-of-frame samples read zero."""
    h, w = img.shape[:2]
    cx, cy = center
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([2 * cy - ys, 2 * cx - xs])
    return np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="constant", cval=0.0)
                     for c in range(img.shape[2])], axis=2)


def apply_reflective_flare(clean: np.ndarray, spec: FlareSpec) -> FlarePair:
    if spec.kind != "reflective":
        raise ConfigurationError(f"expected a reflective spec, got {spec.kind!r}")
    p = spec.reflective
    clean = np.asarray(clean, dtype=np.float64)
    h, w = clean.shape[:2]
    cx, cy = p.optical_center
    if not (0 <= cx < w and 0 <= cy < h):
        raise ConfigurationError(f"optical center {p.optical_center} outside frame")
    src = source_excess(clean)
    ghost = p.ghost_gain * mirror_about(src, p.optical_center) if p.ghost_gain > 0 else np.zeros_like(clean)
    if p.defocus_radius > 0 and ghost.any():
        ghost = _convolve(ghost, disk_kernel(p.defocus_radius))
    return _compose(clean, ghost, spec)


def apply_flare(clean: np.ndarray, spec: FlareSpec) -> FlarePair:
    if spec.kind == "scattering":
        return apply_scattering_flare(clean, spec)
    return apply_reflective_flare(clean, spec)


def layer_centroid(layer: np.ndarray) -> tuple[float, float]:
    """Intensity-weighted (x, y) centroid of a linear layer."""
    lum = np.asarray(layer).sum(axis=2) if layer.ndim == 3 else np.asarray(layer)
    total = lum.sum()
    if total <= 0:
        raise ValueError("layer is empty")
    ys, xs = np.indices(lum.shape)
    return float((xs * lum).sum() / total), float((ys * lum).sum() / total)


# ---------------------------------------------------------------- remosaic

def remosaic(img: np.ndarray, meta: RawMetadata = SYNTH_METADATA, noise_sigma: float = 0.0,
             seed: int | None = None) -> RawImage:
    """Invert the linear front-end: color matrix, white balance, CFA sampling, quantization.

    ``noise_sigma`` adds Gaussian sensor noise in normalized units before
    quantization.
    """
    m = meta.matrix
    if abs(np.linalg.det(m)) < 1e-9 or np.linalg.cond(m) > 1e8:
        raise InvalidMetadataError("color matrix is singular")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise InvalidMetadataError("image dimensions must be even to remosaic")
    cam = img @ np.linalg.inv(m).T
    cam = cam / np.asarray(meta.wb_gains)
    idx = cfa_index_image(meta.cfa, h, w)
    mosaic = np.take_along_axis(cam, idx[..., None], axis=2)[..., 0]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        mosaic = mosaic + rng.normal(0.0, noise_sigma, mosaic.shape)
    black = np.tile(np.asarray(meta.black_level, dtype=np.float64).reshape(2, 2), (h // 2, w // 2))
    counts = np.floor(mosaic * (meta.white_level - black) + black + 0.5)
    counts = np.clip(counts, 0, meta.white_level).astype(np.uint16)
    return RawImage(counts, meta)
