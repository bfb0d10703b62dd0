"""Paired-dataset construction: cropping, pair building, quality filtering, manifests."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from . import rawio
from .detection import LightSource, detect_light_sources, luminance, refine_mask
from .errors import LowConfidenceError, ManifestParseError
from .flaresim import remosaic
from .isp import RawImage, linearize, run_frontend
from .registration import (Homography, Translation, estimate_homography, estimate_translation,
                           match_blocks, quantize_translation_for_raw, registration_from_dict,
                           shift_raw, warp)

FLARE_KINDS = ("scattering", "reflective")
SCENE_TAGS = ("indoor", "outdoor_day", "outdoor_night")
PATCH_SIZES = {"scattering": 512, "reflective": 1024}
ROLES = {
    "raw_corrupted": "pgm",
    "raw_clean": "pgm",
    "raw_reference": "pgm",
    "rgb_corrupted": "png",
    "rgb_clean": "png",
    "flare_layer": "npy",
}

# counts of the reference corpus, rows by scene, columns by flare kind
REFERENCE_CORPUS_COUNTS = {
    "indoor": {"scattering": 701, "reflective": 79},
    "outdoor_day": {"scattering": 0, "reflective": 803},
    "outdoor_night": {"scattering": 1326, "reflective": 366},
    "total": {"scattering": 2027, "reflective": 1248},
}


# -------------------------------------------------------------------- types

@dataclass(frozen=True)
class Quality:
    residual_shift_px: float
    exposure_ratio: float
    flare_coverage: float

    def to_dict(self):
        return {"residual_shift_px": self.residual_shift_px, "exposure_ratio": self.exposure_ratio,
                "flare_coverage": self.flare_coverage}


@dataclass(frozen=True)
class QualityThresholds:
    max_residual_px: float = 0.3
    exposure_ratio_band: tuple[float, float] = (0.95, 1.05)
    coverage_band: tuple[float, float] = (0.001, 0.6)


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    flare_kind: str
    scene_tag: str
    device_tag: str
    patch_size: int
    paths: dict[str, str] = field(default_factory=dict)
    registration: Translation | Homography | None = None
    quality: Quality | None = None
    accepted: bool = False
    reject_reason: str | None = None
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.flare_kind not in FLARE_KINDS:
            raise ValueError(f"flare_kind must be one of {FLARE_KINDS}")
        if self.scene_tag not in SCENE_TAGS:
            raise ValueError(f"scene_tag must be one of {SCENE_TAGS}")
        if self.patch_size != PATCH_SIZES[self.flare_kind]:
            raise ValueError(f"{self.flare_kind} pairs are {PATCH_SIZES[self.flare_kind]} px, "
                             f"got {self.patch_size}")
        for role in self.paths:
            if role not in ROLES:
                raise ValueError(f"unknown path role {role!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "flare_kind": self.flare_kind,
            "scene_tag": self.scene_tag,
            "device_tag": self.device_tag,
            "patch_size": self.patch_size,
            "paths": dict(sorted(self.paths.items())),
            "registration": self.registration.to_dict() if self.registration is not None else None,
            "quality": self.quality.to_dict() if self.quality is not None else None,
            "accepted": self.accepted,
            "reject_reason": self.reject_reason,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PairRecord":
        q = d.get("quality")
        return cls(
            pair_id=str(d["pair_id"]),
            flare_kind=d["flare_kind"],
            scene_tag=d["scene_tag"],
            device_tag=d.get("device_tag", ""),
            patch_size=int(d["patch_size"]),
            paths=dict(d.get("paths") or {}),
            registration=registration_from_dict(d.get("registration")),
            quality=Quality(**q) if q is not None else None,
            accepted=bool(d.get("accepted", False)),
            reject_reason=d.get("reject_reason"),
            origin=tuple(d.get("origin", (0, 0))),
        )


def _registration_equal(a, b) -> bool:
    if a is None or b is None:
        return a is b
    if type(a) is not type(b):
        return False
    if isinstance(a, Homography):
        return bool(np.array_equal(a.matrix, b.matrix)) and a.rms == b.rms and a.n_inliers == b.n_inliers
    return a == b


def records_equal(a: PairRecord, b: PairRecord) -> bool:
    return (replace(a, registration=None) == replace(b, registration=None)
            and _registration_equal(a.registration, b.registration))


@dataclass
class DatasetManifest:
    records: list[PairRecord] = field(default_factory=list)

    @property
    def stats(self) -> dict[str, Any]:
        return manifest_stats(self)

    def accepted(self) -> list[PairRecord]:
        return [r for r in self.records if r.accepted]

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest) or len(self.records) != len(other.records):
            return False
        key = lambda r: r.pair_id  # noqa: E731
        return all(records_equal(a, b) for a, b in zip(sorted(self.records, key=key),
                                                       sorted(other.records, key=key)))


def manifest_stats(manifest: DatasetManifest) -> dict[str, Any]:
    """Accepted-pair counts by scene tag (rows) and flare kind (columns), with totals."""
    table = {tag: {kind: 0 for kind in FLARE_KINDS} for tag in SCENE_TAGS}
    rejected = 0
    for r in manifest.records:
        if r.accepted:
            table[r.scene_tag][r.flare_kind] += 1
        else:
            rejected += 1
    table["total"] = {kind: sum(table[t][kind] for t in SCENE_TAGS) for kind in FLARE_KINDS}
    for row in table.values():
        row["total"] = sum(row[k] for k in FLARE_KINDS)
    table["rejected"] = rejected
    return table


def manifest_write(path, manifest: DatasetManifest) -> Path:
    """JSON lines sorted by pair_id, closed by a ``{"stats": ...}`` footer line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r.to_dict(), sort_keys=True)
             for r in sorted(manifest.records, key=lambda r: r.pair_id)]
    lines.append(json.dumps({"stats": manifest_stats(manifest)}, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    return path


def manifest_read(path) -> DatasetManifest:
    path = Path(path)
    records: list[PairRecord] = []
    footer = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if footer is not None:
            raise ManifestParseError("content after the stats footer", lineno)
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"invalid JSON: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise ManifestParseError("each line must be a JSON object", lineno)
        if set(obj) == {"stats"}:
            footer = (lineno, obj["stats"])
            continue
        try:
            records.append(PairRecord.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"bad pair record: {exc}", lineno) from exc
    manifest = DatasetManifest(records)
    if footer is not None and footer[1] != manifest_stats(manifest):
        raise ManifestParseError("stats footer does not match the records", footer[0])
    return manifest


# ---------------------------------------------------------------- cropping

def crop_origin(center: tuple[float, float], patch_size: int, width: int, height: int,
                bounds: tuple[int, int, int, int] | None = None) -> tuple[int, int]:
    """Even (x0, y0) of a ``patch_size`` window centred on ``center``, clamped to the frame.

    ``bounds`` (x0, y0, x1, y1) optionally restricts the window further.
    """
    bx0, by0, bx1, by1 = bounds if bounds is not None else (0, 0, width, height)
    if patch_size > bx1 - bx0 or patch_size > by1 - by0:
        raise ValueError(f"patch size {patch_size} exceeds the usable area")
    origin = []
    for c, lo, hi in ((center[0], bx0, bx1), (center[1], by0, by1)):
        o = int(math.floor(c - patch_size / 2 + 0.5))
        o = min(max(o, lo), hi - patch_size)
        o -= o % 2
        if o < lo:
            o += 2
        origin.append(o)
    return origin[0], origin[1]


def crop_raw(raw: RawImage, x0: int, y0: int, size: int) -> RawImage:
    if x0 % 2 or y0 % 2:
        raise ValueError("raw crops need even origins")
    return RawImage(raw.pixels[y0:y0 + size, x0:x0 + size], raw.meta)


@dataclass(eq=False)
class PatchPair:
    origin: tuple[int, int]
    source: LightSource | None
    rgb_corrupted: np.ndarray
    rgb_clean: np.ndarray
    raw_corrupted: RawImage
    raw_clean: RawImage


def crop_patches(rgb_corrupted: np.ndarray, rgb_clean: np.ndarray, raw_corrupted: RawImage,
                 raw_clean: RawImage, sources: list[LightSource], patch_size: int,
                 bounds: tuple[int, int, int, int] | None = None) -> list[PatchPair]:
    """One co-located patch pair per source; RGB and raw share the same even origin."""
    h, w = rgb_corrupted.shape[:2]
    out = []
    for src in sources:
        x0, y0 = crop_origin(src.centroid, patch_size, w, h, bounds)
        sl = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
        out.append(PatchPair((x0, y0), src, rgb_corrupted[sl].copy(), rgb_clean[sl].copy(),
                             crop_raw(raw_corrupted, x0, y0, patch_size),
                             crop_raw(raw_clean, x0, y0, patch_size)))
    return out


# ----------------------------------------------------------------- quality

DIFF_THRESHOLD = 8  # codes, after 3x3 median smoothing


def difference_mask(corrupted: np.ndarray, clean: np.ndarray, threshold: float = DIFF_THRESHOLD,
                    morph_radius: int = 2) -> np.ndarray:
    """Pixels where ``corrupted`` is brighter than ``clean`` by more than ``threshold`` codes."""
    diff = (np.asarray(corrupted, dtype=np.int16) - np.asarray(clean, dtype=np.int16)).max(axis=2)
    diff = ndimage.median_filter(diff, size=3, mode="nearest")
    return refine_mask(diff > threshold, morph_radius)


def smooth_difference_mask(corrupted: np.ndarray, clean: np.ndarray,
                           threshold: float = DIFF_THRESHOLD, sigma: float = 3.0) -> np.ndarray:
    """Flare mask for low-frequency flare on noisy frames: Gaussian-smoothed luminance difference."""
    diff = luminance(corrupted) - luminance(clean)
    return ndimage.gaussian_filter(diff, sigma, mode="nearest") > threshold


def exposure_ratio(corrupted: np.ndarray, clean: np.ndarray, exclude: np.ndarray) -> float:
    """Median luminance ratio outside the flare mask."""
    keep = ~exclude
    if not keep.any():
        return float("nan")
    a = float(np.median(luminance(corrupted)[keep]))
    b = float(np.median(luminance(clean)[keep]))
    if b <= 0:
        return float("inf") if a > 0 else 1.0
    return a / b


def quality_filter(record: PairRecord, thresholds: QualityThresholds = QualityThresholds()) -> PairRecord:
    """Accept iff every quality metric is within its band; otherwise name the first violation."""
    q = record.quality
    if q is None:
        return replace(record, accepted=False, reject_reason="missing_quality")
    lo, hi = thresholds.exposure_ratio_band
    clo, chi = thresholds.coverage_band
    if not q.residual_shift_px <= thresholds.max_residual_px:
        reason = "residual_shift_px"
    elif not lo <= q.exposure_ratio <= hi:
        reason = "exposure_ratio"
    elif not clo <= q.flare_coverage <= chi:
        reason = "flare_coverage"
    else:
        return replace(record, accepted=True, reject_reason=None)
    return replace(record, accepted=False, reject_reason=reason)


# ---------------------------------------------------------------- building

@dataclass(eq=False)
class BuiltPair:
    """A pair record plus the arrays that go with it (written by ``write_pair``)."""

    record: PairRecord
    rgb_corrupted: np.ndarray
    rgb_clean: np.ndarray
    raw_corrupted: RawImage
    raw_clean: RawImage
    flare_layer: np.ndarray
    raw_reference: RawImage | None = None
    mask: np.ndarray | None = None


def pair_dir(root, record: PairRecord) -> Path:
    return Path(root) / record.flare_kind / record.pair_id


def write_pair(root, built: BuiltPair) -> PairRecord:
    """Write the pair under ``{kind}/{pair_id}/{role}.{ext}``; returns the record with paths."""
    root = Path(root)
    rec = built.record
    d = pair_dir(root, rec)
    paths = {}

    def rel(role):
        p = d / f"{role}.{ROLES[role]}"
        paths[role] = p.relative_to(root).as_posix()
        return p

    rawio.write_raw(rel("raw_corrupted"), built.raw_corrupted)
    rawio.write_raw(rel("raw_clean"), built.raw_clean)
    if built.raw_reference is not None:
        rawio.write_raw(rel("raw_reference"), built.raw_reference)
    rawio.write_png(rel("rgb_corrupted"), built.rgb_corrupted)
    rawio.write_png(rel("rgb_clean"), built.rgb_clean)
    rawio.write_linear(rel("flare_layer"), built.flare_layer)
    return replace(rec, paths=paths)


def _valid_bounds(ix: int, iy: int, width: int, height: int, margin: int = 2):
    return (max(0, ix) + margin, max(0, iy) + margin,
            min(width, width + ix) - margin, min(height, height + iy) - margin)


def build_scattering_pairs(raw_corrupted: RawImage, raw_clean: RawImage, capture_id: str,
                           scene_tag: str, device_tag: str = "",
                           truth_flare_layer: np.ndarray | None = None,
                           patch_size: int = PATCH_SIZES["scattering"], max_patches: int = 4,
                           background_mask: np.ndarray | None = None,
                           thresholds: QualityThresholds = QualityThresholds()) -> list[BuiltPair]:
    """Register a corrupted/clean capture pair and cut patches around light sources.

    The clean raw is aligned with an even, interpolation-free index shift, then
    re-rendered. Patches are centred on sources detected in the clean frame.
    """
    rgb_c = run_frontend(raw_corrupted)
    rgb_k = run_frontend(raw_clean)
    t = estimate_translation(rgb_c, rgb_k, domain="linear")
    q = quantize_translation_for_raw(t)
    aligned_raw, _ = shift_raw(raw_clean, q.ix, q.iy)
    rgb_a = run_frontend(aligned_raw)
    h, w = rgb_c.shape[:2]
    bounds = _valid_bounds(q.ix, q.iy, w, h)
    sources = detect_light_sources(rgb_a, background_mask=background_mask)[:max_patches]
    lin_c = linearize(rgb_c)
    lin_a = linearize(rgb_a)
    built = []
    for k, patch in enumerate(crop_patches(rgb_c, rgb_a, raw_corrupted, aligned_raw, sources,
                                           patch_size, bounds)):
        x0, y0 = patch.origin
        sl = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
        try:
            resid = estimate_translation(patch.rgb_corrupted, patch.rgb_clean, domain="linear")
            residual = float(math.hypot(resid.dx, resid.dy))
        except LowConfidenceError:
            residual = float(math.hypot(*q.residual))
        mask = smooth_difference_mask(patch.rgb_corrupted, patch.rgb_clean)
        quality = Quality(residual, exposure_ratio(patch.rgb_corrupted, patch.rgb_clean, mask),
                          float(mask.mean()))
        if truth_flare_layer is not None:
            layer = np.asarray(truth_flare_layer, dtype=np.float64)[sl]
        else:
            layer = np.maximum(lin_c[sl] - lin_a[sl], 0.0)
        rec = PairRecord(f"{capture_id}-s{k:02d}", "scattering", scene_tag, device_tag, patch_size,
                         registration=t, quality=quality, origin=(x0, y0))
        built.append(BuiltPair(quality_filter(rec, thresholds), patch.rgb_corrupted,
                               patch.rgb_clean, patch.raw_corrupted, patch.raw_clean, layer,
                               mask=mask))
    return built


def feather_weights(mask: np.ndarray, ramp: float = 8.0) -> np.ndarray:
    """1 inside the mask, falling linearly to 0 over ``ramp`` px outside it."""
    if not mask.any():
        return np.zeros(mask.shape)
    dist = ndimage.distance_transform_edt(~mask)
    return np.clip(1.0 - dist / ramp, 0.0, 1.0)


def symmetric_region(sources: list[LightSource], center: tuple[float, float], shape,
                     scale: float = 3.0, margin: float = 16.0) -> np.ndarray:
    """Disks around the point reflections 2c - p of the detected sources."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    region = np.zeros((h, w), dtype=bool)
    for s in sources:
        gx, gy = 2 * center[0] - s.centroid[0], 2 * center[1] - s.centroid[1]
        r = scale * s.radius + margin
        region |= (xs - gx) ** 2 + (ys - gy) ** 2 <= r * r
    return region


def _alignment_residual(img: np.ndarray, warped: np.ndarray, valid: np.ndarray,
                        h: Homography, min_blocks: int = 8) -> float:
    """Median displacement left between ``img`` and the registered image.

    Blocks are matched with a small search inside the valid area; the median
    ignores blocks disturbed by flare, which differs between the two frames.
    """
    src, dst, _ = match_blocks(img, warped, search=4)
    if len(dst):
        inner = ndimage.binary_erosion(valid, iterations=24)
        keep = inner[dst[:, 1].astype(int), dst[:, 0].astype(int)]
        src, dst = src[keep], dst[keep]
    if len(dst) < min_blocks:
        return float(h.rms)
    return float(np.median(np.linalg.norm(src - dst, axis=1)))


@dataclass(frozen=True)
class ReflectiveParams:
    diff_threshold: float = DIFF_THRESHOLD
    morph_radius: int = 2
    feather_px: float = 8.0
    max_coverage: float = 0.4
    symmetry_scale: float = 3.0
    symmetry_margin: float = 16.0


def _reflective_side(img: np.ndarray, other: np.ndarray, h: Homography, raw: RawImage,
                     raw_other: RawImage, center, pair_id: str, scene_tag: str, device_tag: str,
                     params: ReflectiveParams, thresholds: QualityThresholds,
                     background_mask: np.ndarray | None) -> BuiltPair:
    warped, valid = warp(other, h)
    valid = ndimage.binary_erosion(valid, iterations=2)
    sources = detect_light_sources(img, background_mask=background_mask)
    diff_mask = difference_mask(img, warped, params.diff_threshold, params.morph_radius)
    region = symmetric_region(sources, center, img.shape[:2], params.symmetry_scale,
                              params.symmetry_margin)
    mask = diff_mask & region & valid
    alpha = feather_weights(mask, params.feather_px) * valid
    gt = img * (1.0 - alpha[..., None]) + warped * alpha[..., None]
    gt = np.clip(np.floor(gt + 0.5), 0, 255).astype(np.uint8)
    coverage = float(mask.mean())
    exclude = mask | ~valid
    quality = Quality(_alignment_residual(img, warped, valid, h),
                      exposure_ratio(img, warped, exclude), coverage)
    lin_img, lin_gt = linearize(img), linearize(gt)
    layer = np.maximum(lin_img - lin_gt, 0.0)
    reference = remosaic(lin_gt, raw.meta)
    size = img.shape[0]
    rec = PairRecord(pair_id, "reflective", scene_tag, device_tag, size, registration=h,
                     quality=quality)
    if coverage > params.max_coverage:
        rec = replace(rec, accepted=False, reject_reason="flare_coverage")
    else:
        rec = quality_filter(rec, thresholds)
    return BuiltPair(rec, img, gt, raw, raw_other, layer, raw_reference=reference, mask=mask)


def build_reflective_pairs(img_a: np.ndarray, img_b: np.ndarray, raw_a: RawImage, raw_b: RawImage,
                           capture_id: str, scene_tag: str, device_tag: str = "",
                           optical_center: tuple[float, float] | None = None,
                           params: ReflectiveParams = ReflectiveParams(),
                           thresholds: QualityThresholds = QualityThresholds(),
                           background_mask: np.ndarray | None = None) -> tuple[BuiltPair, BuiltPair]:
    """Two pairs from one rotated capture pair by subtraction and merging.

    Raw frames are passed through unwarped. Each side's ground truth is its
    own image with the ghost region replaced by the registered other image.
    """
    if img_a.shape != img_b.shape:
        raise ValueError("captures must have equal dimensions")
    h_img, w_img = img_a.shape[:2]
    if h_img != w_img or h_img != PATCH_SIZES["reflective"]:
        raise ValueError(f"reflective captures must be {PATCH_SIZES['reflective']} px square")
    center = optical_center if optical_center is not None else (w_img / 2.0, h_img / 2.0)
    h = estimate_homography(img_a, img_b)
    first = _reflective_side(img_a, img_b, h, raw_a, raw_b, center, f"{capture_id}-a", scene_tag,
                             device_tag, params, thresholds, background_mask)
    second = _reflective_side(img_b, img_a, h.inverse(), raw_b, raw_a, center, f"{capture_id}-b",
                              scene_tag, device_tag, params, thresholds, background_mask)
    return first, second
