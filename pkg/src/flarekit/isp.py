"""Raw image model and the RAW->RGB processing pipeline.

The pipeline has a fixed linear front-end (black level, white balance,
demosaic, color correction, sRGB tone map) followed by an ordered list of
back-end stages that operate on 8-bit encoded images.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels
from .errors import CodecError, ConfigurationError, InvalidMetadataError

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_CHANNEL_INDEX = {"R": 0, "G": 1, "B": 2}

BACKEND_STAGES = ("denoise", "flare_removal", "sharpen", "compression")
FRONTEND_STAGES = ("black_level_correct", "white_balance", "demosaic_bilinear",
                   "color_correct", "tone_map")

PRESETS = {
    1: ("denoise", "flare_removal", "sharpen", "compression"),
    2: ("denoise", "sharpen", "flare_removal", "compression"),
    3: ("denoise", "sharpen", "compression", "flare_removal"),
    4: ("sharpen", "compression", "flare_removal"),
}


def cfa_channel_map(cfa: str) -> np.ndarray:
    """2x2 array of channel indices (0=R, 1=G, 2=B) for one CFA tile."""
    if cfa not in CFA_PATTERNS:
        raise InvalidMetadataError(f"unknown CFA pattern {cfa!r}")
    return np.array([[_CHANNEL_INDEX[cfa[0]], _CHANNEL_INDEX[cfa[1]]],
                     [_CHANNEL_INDEX[cfa[2]], _CHANNEL_INDEX[cfa[3]]]])


def cfa_index_image(cfa: str, height: int, width: int) -> np.ndarray:
    """Per-pixel channel index for a mosaic of the given size."""
    tile = cfa_channel_map(cfa)
    reps = ((height + 1) // 2, (width + 1) // 2)
    return np.tile(tile, reps)[:height, :width]


@dataclass(frozen=True)
class RawMetadata:
    """Sensor metadata stored in the JSON sidecar next to each raw mosaic.

    ``black_level`` holds one count per CFA tile position, in the order
    top-left, top-right, bottom-left, bottom-right.
    """

    cfa: str = "RGGB"
    bit_depth: int = 12
    black_level: tuple[int, int, int, int] = (256, 256, 256, 256)
    white_level: int = 4095
    wb_gains: tuple[float, float, float] = (2.0, 1.0, 1.6)
    color_matrix: tuple[tuple[float, float, float], ...] = (
        (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        bl = self.black_level
        if np.isscalar(bl):
            bl = (int(bl),) * 4
        object.__setattr__(self, "black_level", tuple(int(b) for b in bl))
        object.__setattr__(self, "wb_gains", tuple(float(g) for g in self.wb_gains))
        object.__setattr__(self, "color_matrix",
                           tuple(tuple(float(v) for v in row) for row in self.color_matrix))
        self.validate()

    def validate(self) -> None:
        if self.cfa not in CFA_PATTERNS:
            raise InvalidMetadataError(f"unknown CFA pattern {self.cfa!r}")
        if not 10 <= int(self.bit_depth) <= 16:
            raise InvalidMetadataError(f"bit_depth must be in [10, 16], got {self.bit_depth}")
        if len(self.black_level) != 4:
            raise InvalidMetadataError("black_level needs one value per CFA site")
        if self.white_level > 2 ** int(self.bit_depth) - 1:
            raise InvalidMetadataError("white_level exceeds bit depth")
        if any(b < 0 or b >= self.white_level for b in self.black_level):
            raise InvalidMetadataError(
                f"black_level {self.black_level} must be below white_level {self.white_level}")
        gains = np.asarray(self.wb_gains)
        if gains.shape != (3,) or not np.all(np.isfinite(gains)) or np.any(gains <= 0):
            raise InvalidMetadataError(f"wb_gains must be 3 finite positive values, got {self.wb_gains}")
        m = np.asarray(self.color_matrix)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvalidMetadataError("color_matrix must be a finite 3x3 matrix")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.color_matrix, dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cfa": self.cfa,
            "bit_depth": int(self.bit_depth),
            "black_level": list(self.black_level),
            "white_level": int(self.white_level),
            "wb_gains": list(self.wb_gains),
            "color_matrix": [list(r) for r in self.color_matrix],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RawMetadata":
        required = ("cfa", "bit_depth", "black_level", "white_level", "wb_gains", "color_matrix")
        for key in required:
            if key not in d:
                raise InvalidMetadataError(f"sidecar is missing field {key!r}")
        try:
            return cls(
                cfa=str(d["cfa"]),
                bit_depth=int(d["bit_depth"]),
                black_level=d["black_level"],
                white_level=int(d["white_level"]),
                wb_gains=tuple(d["wb_gains"]),
                color_matrix=tuple(tuple(r) for r in d["color_matrix"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidMetadataError):
                raise
            raise InvalidMetadataError(f"malformed sidecar: {exc}") from exc


@dataclass(frozen=True, eq=False)
class RawImage:
    """Bayer mosaic of unsigned sensor counts plus its metadata."""

    pixels: np.ndarray
    meta: RawMetadata = field(default_factory=RawMetadata)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise InvalidMetadataError("raw pixels must be a 2-D mosaic")
        h, w = px.shape
        if h % 2 or w % 2 or h == 0 or w == 0:
            raise InvalidMetadataError(f"raw dimensions must be even, got {w}x{h}")
        if px.size and (px.min() < 0 or px.max() > self.meta.white_level):
            raise InvalidMetadataError("raw counts must lie in [0, white_level]")
        px = px.astype(np.uint16)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def cfa(self) -> str:
        return self.meta.cfa

    def black_level_map(self) -> np.ndarray:
        tile = np.asarray(self.meta.black_level, dtype=np.float64).reshape(2, 2)
        return np.tile(tile, (self.height // 2, self.width // 2))

    def __eq__(self, other):
        if not isinstance(other, RawImage):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class Mosaic:
    """Black-level-corrected floating point mosaic (nominally [0, 1])."""

    data: np.ndarray
    cfa: str


# ---------------------------------------------------------------- front-end

def black_level_correct(raw: RawImage) -> Mosaic:
    black = raw.black_level_map()
    span = raw.meta.white_level - black
    if np.any(span <= 0):
        raise InvalidMetadataError("black_level must be below white_level")
    data = np.clip(raw.pixels.astype(np.float64) - black, 0.0, None) / span
    return Mosaic(data, raw.cfa)


def white_balance(mosaic: Mosaic, gains: Sequence[float]) -> Mosaic:
    g = np.asarray(gains, dtype=np.float64)
    if g.shape != (3,) or not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise InvalidMetadataError(f"white balance gains must be positive, got {tuple(gains)}")
    idx = cfa_index_image(mosaic.cfa, *mosaic.data.shape)
    return Mosaic(mosaic.data * g[idx], mosaic.cfa)


_K_GREEN = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0
_K_RED_BLUE = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0


def demosaic_bilinear(mosaic: Mosaic) -> np.ndarray:
    """Bilinear demosaic with mirrored borders; returns float (H, W, 3)."""
    data = mosaic.data
    h, w = data.shape
    if h % 2 or w % 2:
        raise InvalidMetadataError("mosaic dimensions must be even")
    idx = cfa_index_image(mosaic.cfa, h, w)
    out = np.empty((h, w, 3), dtype=np.float64)
    # 'mirror' (reflect without edge repeat) keeps the CFA phase of the padding
    for c, kernel in ((0, _K_RED_BLUE), (1, _K_GREEN), (2, _K_RED_BLUE)):
        plane = np.where(idx == c, data, 0.0)
        out[..., c] = ndimage.correlate(plane, kernel, mode="mirror")
    return out


def color_correct(img: np.ndarray, matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidMetadataError("color matrix must be a finite 3x3 matrix")
    return np.clip(img @ m.T, 0.0, None)


def srgb_encode(x: np.ndarray) -> np.ndarray:
    """sRGB opto-electronic transfer on [0, 1] floats."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(np.maximum(x, 0.0031308), 1 / 2.4) - 0.055)


def srgb_decode(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, np.power((np.maximum(v, 0.04045) + 0.055) / 1.055, 2.4))


def tone_map(img: np.ndarray) -> np.ndarray:
    """Linear light -> 8-bit sRGB, round to nearest."""
    enc = srgb_encode(np.clip(img, 0.0, 1.0))
    return np.floor(enc * 255.0 + 0.5).astype(np.uint8)


_LINEAR_LUT = srgb_decode(np.arange(256) / 255.0)


def linearize(img: np.ndarray) -> np.ndarray:
    """8-bit sRGB -> linear light (exact inverse of tone_map on code values)."""
    return _LINEAR_LUT[np.asarray(img, dtype=np.uint8)]


# ----------------------------------------------------------------- back-end

def as_encoded(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"expected an 8-bit (H, W, 3) image, got {arr.dtype} {arr.shape}")
    return arr


def denoise(img: np.ndarray, strength: float, backend: str | None = None) -> np.ndarray:
    """Bilateral smoothing: spatial sigma 2*strength px, range sigma 25*strength codes."""
    img = as_encoded(img)
    if strength < 0:
        raise ConfigurationError("denoise strength must be >= 0")
    if strength == 0:
        return img.copy()
    return kernels.bilateral_u8(img, 2.0 * strength, 25.0 * strength, backend=backend)


def sharpen_usm(img: np.ndarray, amount: float, radius: float) -> np.ndarray:
    img = as_encoded(img)
    if amount < 0 or radius <= 0:
        raise ConfigurationError("sharpen needs amount >= 0 and radius > 0")
    if amount == 0:
        return img.copy()
    f = img.astype(np.float64)
    blur = ndimage.gaussian_filter(f, sigma=(radius, radius, 0), mode="reflect")
    out = f + amount * (f - blur)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG (4:2:0) encode then decode."""
    img = as_encoded(img)
    if not 1 <= int(quality) <= 100:
        raise ConfigurationError(f"jpeg quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    try:
        Image.fromarray(img, mode="RGB").save(buf, format="JPEG", quality=int(quality),
                                              subsampling=2, optimize=False, progressive=False)
        buf.seek(0)
        with Image.open(buf) as decoded:
            out = np.asarray(decoded.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise CodecError(f"JPEG round trip failed: {exc}") from exc
    if out.shape != img.shape:
        raise CodecError(f"JPEG changed dimensions {img.shape} -> {out.shape}")
    return out


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class PipelineConfig:
    backend_order: tuple[str, ...] = ()
    denoise_strength: float = 1.0
    sharpen_amount: float = 1.0
    sharpen_radius: float = 1.5
    jpeg_quality: int = 60
    config_id: int | None = None
    # domain the flare-removal stage works in: "encoded" or "linear"
    removal_domain: str = "encoded"

    def __post_init__(self):
        order = tuple(self.backend_order)
        object.__setattr__(self, "backend_order", order)
        for stage in order:
            if stage not in BACKEND_STAGES:
                raise ConfigurationError(f"unknown back-end stage {stage!r}")
        if len(set(order)) != len(order):
            raise ConfigurationError(f"duplicate stages in {order}")
        if self.denoise_strength < 0:
            raise ConfigurationError("denoise_strength must be >= 0")
        if not 0 <= self.sharpen_amount <= 3:
            raise ConfigurationError("sharpen_amount must be in [0, 3]")
        if self.sharpen_radius <= 0:
            raise ConfigurationError("sharpen_radius must be > 0")
        if not 1 <= int(self.jpeg_quality) <= 100:
            raise ConfigurationError("jpeg_quality must be in [1, 100]")
        if self.config_id is not None:
            if self.config_id not in PRESETS:
                raise ConfigurationError(f"config_id must be 1..4, got {self.config_id}")
            if order != PRESETS[self.config_id]:
                raise ConfigurationError(f"config_id {self.config_id} does not match order {order}")
        if self.removal_domain not in ("encoded", "linear"):
            raise ConfigurationError(f"removal_domain must be 'encoded' or 'linear'")

    @property
    def needs_remover(self) -> bool:
        return "flare_removal" in self.backend_order

    def without_removal(self) -> "PipelineConfig":
        order = tuple(s for s in self.backend_order if s != "flare_removal")
        return replace(self, backend_order=order, config_id=None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "backend_order": list(self.backend_order),
            "denoise_strength": self.denoise_strength,
            "sharpen_amount": self.sharpen_amount,
            "sharpen_radius": self.sharpen_radius,
            "jpeg_quality": int(self.jpeg_quality),
            "config_id": self.config_id,
            "removal_domain": self.removal_domain,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is None and "backend_order" not in d and d.get("config_id") is not None:
            preset = d["config_id"]  # a bare config_id names a preset
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields {sorted(unknown)}")
        if preset is not None:
            base = pipeline_config_preset(int(preset))
            d.setdefault("backend_order", base.backend_order)
            d.setdefault("config_id", base.config_id)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def pipeline_config_preset(config_id: int, **params) -> PipelineConfig:
    """One of the four stage orderings of the ordering study."""
    if config_id not in PRESETS:
        raise ConfigurationError(f"preset id must be 1..4, got {config_id}")
    return PipelineConfig(backend_order=PRESETS[config_id], config_id=config_id, **params)


def augment_config(config: PipelineConfig, rng: np.random.Generator) -> PipelineConfig:
    """Dataset-style augmentation: USM amount ~ U[0.5, 2.0], JPEG quality ~ U{50..80}."""
    return replace(config,
                   sharpen_amount=float(rng.uniform(0.5, 2.0)),
                   jpeg_quality=int(rng.integers(50, 81)))


# ------------------------------------------------------------------- trace

def digest(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(f"{a.dtype.str}{a.shape}".encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class StageTrace:
    entries: list[dict[str, Any]] = field(default_factory=list)

    def record(self, stage: str, params: dict[str, Any], output: np.ndarray) -> None:
        self.entries.append({"stage": stage, "params": params, "digest": digest(output)})

    @property
    def stages(self) -> list[str]:
        return [e["stage"] for e in self.entries]

    def to_json(self) -> str:
        return json.dumps({"stages": self.entries}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StageTrace":
        return cls(list(json.loads(text)["stages"]))


# ---------------------------------------------------------------- pipeline

def run_frontend(raw: RawImage, trace: StageTrace | None = None) -> np.ndarray:
    """Fixed linear front-end ending in the sRGB tone map (the RAW2RGB image)."""
    trace = trace if trace is not None else StageTrace()
    m = black_level_correct(raw)
    trace.record("black_level_correct", {"black_level": list(raw.meta.black_level),
                                         "white_level": raw.meta.white_level}, m.data)
    m = white_balance(m, raw.meta.wb_gains)
    trace.record("white_balance", {"gains": list(raw.meta.wb_gains)}, m.data)
    rgb = demosaic_bilinear(m)
    trace.record("demosaic_bilinear", {"cfa": raw.cfa}, rgb)
    rgb = color_correct(rgb, raw.meta.matrix)
    trace.record("color_correct", {"matrix": [list(r) for r in raw.meta.color_matrix]}, rgb)
    enc = tone_map(rgb)
    trace.record("tone_map", {"transfer": "srgb"}, enc)
    return enc


def apply_removal(img: np.ndarray, remover, domain: str = "encoded"):
    """Run a remover on an encoded image; in the linear domain the remover sees
    linear light and its result is re-encoded."""
    if domain == "linear":
        lin = linearize(img)
        res = remover.remove_linear(lin)
        clean = tone_map(res)
        flare = (img.astype(np.int16) - clean.astype(np.int16)).clip(0, 255).astype(np.uint8)
        return (img - flare).astype(np.uint8), flare
    result = remover.remove(img)
    return result.clean_estimate, result.flare_estimate


def apply_stage(img: np.ndarray, stage: str, config: PipelineConfig, remover=None):
    """Run one back-end stage; returns (output, trace parameters)."""
    if stage == "denoise":
        return denoise(img, config.denoise_strength), {"strength": config.denoise_strength}
    if stage == "sharpen":
        return (sharpen_usm(img, config.sharpen_amount, config.sharpen_radius),
                {"amount": config.sharpen_amount, "radius": config.sharpen_radius})
    if stage == "compression":
        return jpeg_roundtrip(img, config.jpeg_quality), {"quality": int(config.jpeg_quality)}
    if stage == "flare_removal":
        if remover is None:
            raise ConfigurationError("flare_removal stage needs a remover")
        out, _ = apply_removal(img, remover, config.removal_domain)
        return out, {"remover": remover.describe(), "domain": config.removal_domain}
    raise ConfigurationError(f"unknown back-end stage {stage!r}")


def run_backend(img: np.ndarray, config: PipelineConfig, remover=None,
                trace: StageTrace | None = None) -> np.ndarray:
    trace = trace if trace is not None else StageTrace()
    if config.needs_remover and remover is None:
        raise ConfigurationError("pipeline contains flare_removal but no remover was given")
    out = as_encoded(img)
    for stage in config.backend_order:
        out, params = apply_stage(out, stage, config, remover)
        trace.record(stage, params, out)
    return out


def run_pipeline(raw: RawImage, config: PipelineConfig, remover=None) -> tuple[np.ndarray, StageTrace]:
    if config.needs_remover and remover is None:
        raise ConfigurationError("pipeline contains flare_removal but no remover was given")
    trace = StageTrace()
    enc = run_frontend(raw, trace)
    out = run_backend(enc, config, remover, trace)
    return out, trace
