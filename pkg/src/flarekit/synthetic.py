"""Synthetic capture pairs that stand in for physical shoots.

Scattering captures pair a flare-corrupted frame with a clean frame taken
after a small camera translation. Reflective captures pair two frames of the
same scene under a small camera rotation, each with its own ghost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flaresim import (SYNTH_METADATA, FlareSpec, LightSourceSpec, ReflectiveParams,
                       ScatteringParams, SceneSpec, apply_flare, remosaic, synth_scene)
from .isp import RawImage

NIGHT_BRIGHTNESS = 0.35
SCENE_BRIGHTNESS = {"indoor": 0.7, "outdoor_day": 1.0, "outdoor_night": NIGHT_BRIGHTNESS}


@dataclass(eq=False)
class ScatteringCapture:
    raw_corrupted: RawImage
    raw_clean: RawImage
    flare_layer: np.ndarray  # aligned with the corrupted frame
    clean: np.ndarray        # noiseless linear clean frame, aligned with the corrupted frame
    shift: tuple[int, int]   # camera offset of the clean frame, pixels
    scene: SceneSpec
    spec: FlareSpec
    scene_tag: str


@dataclass(eq=False)
class ReflectiveCapture:
    raw_a: RawImage
    raw_b: RawImage
    clean_a: np.ndarray
    clean_b: np.ndarray
    corrupted_a: np.ndarray
    corrupted_b: np.ndarray
    flare_a: np.ndarray
    flare_b: np.ndarray
    view_b: np.ndarray       # scene -> frame B homography (frame A is the identity view)
    optical_center: tuple[float, float]
    scene: SceneSpec
    spec: FlareSpec
    scene_tag: str


def rotation_homography(yaw: float, pitch: float, roll: float, focal: float,
                        center: tuple[float, float]) -> np.ndarray:
    """Image-plane homography K R K^-1 of a pure camera rotation (radians)."""
    k = np.array([[focal, 0.0, center[0]], [0.0, focal, center[1]], [0.0, 0.0, 1.0]])
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    h = k @ (rz @ rx @ ry) @ np.linalg.inv(k)
    return h / h[2, 2]


def _scene_tag(rng: np.random.Generator, kind: str) -> str:
    tags = ("indoor", "outdoor_night") if kind == "scattering" else ("indoor", "outdoor_day",
                                                                     "outdoor_night")
    return str(tags[int(rng.integers(len(tags)))])


def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def make_scattering_capture(seed: int, size: int = 640, severity: str = "local",
                            noise_sigma: float = 0.02, max_shift: int = 8,
                            scene_tag: str | None = None) -> ScatteringCapture:
    if severity not in ("local", "global"):
        raise ValueError("severity must be 'local' or 'global'")
    rng = np.random.default_rng(seed)
    tag = scene_tag or _scene_tag(rng, "scattering")
    n_src = int(rng.integers(1, 3))
    margin = 0.3 * size
    sources = tuple(LightSourceSpec((float(rng.uniform(margin, size - margin)),
                                     float(rng.uniform(margin, size - margin))),
                                    float(rng.uniform(6, 14)), float(rng.uniform(2.0, 4.0)))
                    for _ in range(n_src))
    scene = SceneSpec(size, size, sources, seed=_child_seed(rng), brightness=SCENE_BRIGHTNESS[tag])
    params = ScatteringParams(
        glare_sigma=float(rng.uniform(8, 18)),
        glare_gain=float(rng.uniform(0.3, 0.8)),
        streak_count=int(rng.integers(0, 3)),
        streak_angle=float(rng.uniform(0, math.pi)),
        streak_length=float(rng.uniform(40, 120)),
        streak_gain=float(rng.uniform(0.05, 0.2)),
        veiling=float(rng.uniform(0.004, 0.012)) if severity == "global" else 0.0,
    )
    spec = FlareSpec("scattering", scattering=params, seed=seed)
    # even camera offsets keep the clean raw on the same CFA phase after alignment
    shift = tuple(int(2 * rng.integers(-(max_shift // 2), max_shift // 2 + 1)) for _ in range(2))
    clean = synth_scene(scene)
    pair = apply_flare(clean, spec)
    # the clean frame sees the scene shifted by -shift: clean_frame(x) = scene(x + shift)
    view = np.array([[1.0, 0.0, -shift[0]], [0.0, 1.0, -shift[1]], [0.0, 0.0, 1.0]])
    clean_shifted = synth_scene(scene, view)
    raw_c = remosaic(pair.corrupted, SYNTH_METADATA, noise_sigma, seed=_child_seed(rng))
    raw_k = remosaic(np.clip(clean_shifted, 0, 1), SYNTH_METADATA, noise_sigma, seed=_child_seed(rng))
    return ScatteringCapture(raw_c, raw_k, pair.flare_layer, clean, shift, scene, spec, tag)


def _ghost_layout_ok(sources, view_b: np.ndarray, center, size: int, defocus: float) -> bool:
    """Every ghost must be visible in both frames and clear of the other frame's ghosts."""
    inv = np.linalg.inv(view_b)

    def apply(m, p):
        v = m @ np.array([p[0], p[1], 1.0])
        return v[:2] / v[2]

    for s in sources:
        reach = s.radius + defocus + 12.0
        ghost_a = 2 * np.asarray(center) - np.asarray(s.center)
        src_b = apply(view_b, s.center)
        ghost_b = 2 * np.asarray(center) - src_b
        for p in (s.center, src_b, ghost_a, ghost_b, apply(view_b, ghost_a), apply(inv, ghost_b)):
            if not (reach <= p[0] <= size - reach and reach <= p[1] <= size - reach):
                return False
        if np.linalg.norm(ghost_a - apply(inv, ghost_b)) < 2 * reach:
            return False
    return True


def make_reflective_capture(seed: int, size: int = 1024, noise_sigma: float = 0.0,
                            scene_tag: str | None = None) -> ReflectiveCapture:
    rng = np.random.default_rng(seed)
    tag = scene_tag or _scene_tag(rng, "reflective")
    center = (size / 2.0, size / 2.0)
    sign = lambda: 1.0 if rng.uniform() < 0.5 else -1.0  # noqa: E731
    for _attempt in range(1000):
        n_src = int(rng.integers(1, 3))
        sources = []
        for _ in range(n_src):
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(0.2, 0.32) * size
            p = (center[0] + dist * math.cos(ang), center[1] + dist * math.sin(ang))
            # keep sources apart from each other and from the other sources' ghosts
            if all(math.dist(p, s.center) > 0.2 * size
                   and math.dist(p, (2 * center[0] - s.center[0], 2 * center[1] - s.center[1]))
                   > 0.2 * size for s in sources):
                sources.append(LightSourceSpec((float(p[0]), float(p[1])),
                                               float(rng.uniform(16, 28)), float(rng.uniform(2.0, 4.0))))
        yaw = sign() * math.radians(rng.uniform(2.5, 3.5))
        pitch = sign() * math.radians(rng.uniform(0.0, 1.5))
        roll = math.radians(rng.uniform(-1.0, 1.0))
        view_b = rotation_homography(yaw, pitch, roll, focal=1.2 * size, center=center)
        defocus = float(rng.uniform(0.0, 8.0))
        if _ghost_layout_ok(sources, view_b, center, size, defocus):
            break
    else:  # pragma: no cover - the sampling ranges make this practically unreachable
        raise RuntimeError("could not sample a valid reflective layout")
    scene = SceneSpec(size, size, tuple(sources), seed=_child_seed(rng), brightness=SCENE_BRIGHTNESS[tag])
    spec = FlareSpec("reflective", reflective=ReflectiveParams(
        optical_center=center, ghost_gain=float(rng.uniform(0.1, 0.3)), defocus_radius=defocus),
        seed=seed)
    clean_a = synth_scene(scene)
    clean_b = synth_scene(scene, view_b)
    pa, pb = apply_flare(clean_a, spec), apply_flare(clean_b, spec)
    raw_a = remosaic(pa.corrupted, SYNTH_METADATA, noise_sigma, seed=_child_seed(rng))
    raw_b = remosaic(pb.corrupted, SYNTH_METADATA, noise_sigma, seed=_child_seed(rng))
    return ReflectiveCapture(raw_a, raw_b, clean_a, clean_b, pa.corrupted, pb.corrupted,
                             pa.flare_layer, pb.flare_layer, view_b,
                             center, scene, spec, tag)
