from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flarekit.errors import CfaPhaseError, DegenerateGeometryError, LowConfidenceError
from flarekit.flaresim import SceneSpec, synth_scene
from flarekit.isp import RawImage, RawMetadata, black_level_correct, demosaic_bilinear, tone_map
from flarekit.registration import (Homography, Translation, apply_homography, estimate_homography,
                                   estimate_translation, fit_homography, quantize_translation_for_raw,
                                   registration_from_dict, resample_translate, robust_fit_homography,
                                   shift_image, shift_raw, warp)
from flarekit.synthetic import rotation_homography


def scene(size=256, seed=0):
    return tone_map(synth_scene(SceneSpec(size, size, seed=seed)))


def test_identical_images_give_zero_shift():
    img = scene()
    t = estimate_translation(img, img)
    assert abs(t.dx) < 1e-6 and abs(t.dy) < 1e-6 and t.confidence > 10


def test_known_subpixel_shift():
    img = scene().astype(np.float64)
    moving, _ = resample_translate(img, 3.25, -1.5)
    t = estimate_translation(img, moving)
    assert abs(t.dx - 3.25) < 0.1 and abs(t.dy + 1.5) < 0.1


@given(st.floats(-8, 8), st.floats(-8, 8), st.integers(0, 50))
def test_shift_estimate_consistency(dx, dy, seed):
    img = scene(192, seed).astype(np.float64)
    moving, _ = resample_translate(img, dx, dy)
    t = estimate_translation(img, moving)
    assert abs(t.dx - dx) <= 0.1 and abs(t.dy - dy) <= 0.1


def test_independent_noise_is_low_confidence():
    rng = np.random.default_rng(0)
    a, b = rng.random((128, 128)), rng.random((128, 128))
    with pytest.raises(LowConfidenceError) as info:
        estimate_translation(a, b)
    assert info.value.confidence is not None


def test_linear_domain_matches_encoded_domain():
    img = scene(seed=4)
    moving, _ = resample_translate(img.astype(np.float64), -2.6, 1.2)
    moving = np.clip(np.floor(moving + 0.5), 0, 255).astype(np.uint8)
    a = estimate_translation(img, moving)
    b = estimate_translation(img, moving, domain="linear")
    assert abs(a.dx - b.dx) < 0.1 and abs(a.dy - b.dy) < 0.1


def test_translation_round_trip():
    t = Translation(1.5, -2.0, 7.0)
    assert registration_from_dict(t.to_dict()) == t
    assert registration_from_dict(Translation(0, 0).to_dict()).confidence == math.inf


@pytest.mark.parametrize("t,expected", [
    ((3.25, -1.5), (4, -2, -0.75, 0.5)),
    ((0.9, 0.9), (0, 0, 0.9, 0.9)),
    ((1.0, -1.0), (2, -2, -1.0, 1.0)),
    ((-3.0, 5.0), (-4, 6, 1.0, -1.0)),
])
def test_quantize_examples(t, expected):
    q = quantize_translation_for_raw(Translation(*t))
    assert (q.ix, q.iy) == expected[:2]
    assert q.residual == pytest.approx(expected[2:])


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_quantize_properties(dx, dy):
    q = quantize_translation_for_raw(Translation(dx, dy))
    assert q.ix % 2 == 0 and q.iy % 2 == 0
    assert abs(q.residual[0]) <= 1.0 and abs(q.residual[1]) <= 1.0
    assert q.ix + q.residual[0] == pytest.approx(dx)


def _raw(seed=0, size=16, cfa="RGGB"):
    rng = np.random.default_rng(seed)
    return RawImage(rng.integers(256, 4096, (size, size)).astype(np.uint16), RawMetadata(cfa=cfa))


def test_shift_raw_examples():
    raw = _raw()
    same, valid = shift_raw(raw, 0, 0)
    assert same == raw and valid.all()
    moved, valid = shift_raw(raw, 2, 0)
    assert moved.pixels[0, 2] == raw.pixels[0, 0]
    assert not valid[:, :2].any() and valid[:, 2:].all()
    assert (moved.pixels[:, :2] == 256).all()
    with pytest.raises(CfaPhaseError):
        shift_raw(raw, 1, 0)
    with pytest.raises(CfaPhaseError):
        shift_raw(raw, 0, -3)


@given(st.integers(-4, 4), st.integers(-4, 4), st.sampled_from(["RGGB", "GBRG"]))
def test_shift_raw_commutes_with_demosaic_interior(hx, hy, cfa):
    ix, iy = 2 * hx, 2 * hy
    raw = _raw(1, 24, cfa)
    moved, valid = shift_raw(raw, ix, iy)
    a = demosaic_bilinear(black_level_correct(moved))
    b = demosaic_bilinear(black_level_correct(raw))
    b_shift, _ = shift_image(b, ix, iy)
    from scipy import ndimage
    inner = ndimage.binary_erosion(valid, iterations=2)
    assert np.allclose(a[inner], b_shift[inner], atol=1e-12)


# ---------------------------------------------------------------- homography

def test_fit_homography_exact_on_clean_correspondences():
    rng = np.random.default_rng(0)
    h = np.array([[1.01, 0.02, 3.0], [-0.015, 0.99, -2.0], [1e-5, -2e-5, 1.0]])
    src = rng.uniform(0, 500, (30, 2))
    dst = apply_homography(h, src)
    m = fit_homography(src, dst)
    assert np.abs(apply_homography(m, src) - dst).max() < 1e-6


def test_robust_fit_rejects_outliers():
    rng = np.random.default_rng(1)
    h = rotation_homography(0.03, -0.01, 0.005, 600, (256, 256))
    src = rng.uniform(0, 512, (80, 2))
    dst = apply_homography(h, src) + rng.normal(0, 0.1, (80, 2))
    dst[:15] += rng.uniform(-40, 40, (15, 2))
    m, res, inliers = robust_fit_homography(src, dst)
    assert not inliers[:15].any() and inliers[15:].mean() > 0.9
    grid = np.stack(np.meshgrid(np.linspace(0, 512, 10), np.linspace(0, 512, 10)), -1).reshape(-1, 2)
    assert np.abs(apply_homography(m, grid) - apply_homography(h, grid)).max() < 0.3


@pytest.mark.parametrize("pts", [
    np.array([[0, 0], [1, 1], [2, 2], [3, 3], [4, 4.0]]),
    np.array([[0, 0], [10, 0], [0, 10.0]]),
])
def test_degenerate_geometry(pts):
    from flarekit.registration import _check_geometry
    with pytest.raises(DegenerateGeometryError):
        _check_geometry(pts, pts)


def test_identity_homography_on_identical_images():
    img = scene(512, 2)
    h = estimate_homography(img, img)
    assert np.abs(h.matrix - np.eye(3)).max() < 1e-3


def test_flat_images_are_degenerate():
    flat = np.full((256, 256, 3), 90, np.uint8)
    with pytest.raises(DegenerateGeometryError):
        estimate_homography(flat, flat)


def test_rotation_homography_recovered():
    size = 512
    spec = SceneSpec(size, size, seed=6)
    g = rotation_homography(math.radians(1.5), math.radians(-0.8), math.radians(0.5), 1.2 * size,
                            (size / 2, size / 2))
    ref = tone_map(synth_scene(spec))
    mov = tone_map(synth_scene(spec, g))
    h = estimate_homography(ref, mov)
    xs = np.linspace(64, size - 64, 20)
    grid = np.stack(np.meshgrid(xs, xs), -1).reshape(-1, 2)
    # moving pixel x shows scene point g^-1 x, which sits at g^-1 x in the reference
    err = np.linalg.norm(h.apply(grid) - apply_homography(np.linalg.inv(g), grid), axis=1)
    assert err.mean() < 0.3


def test_homography_validation_and_inverse():
    with pytest.raises(DegenerateGeometryError):
        Homography(np.zeros((3, 3)))
    with pytest.raises(DegenerateGeometryError):
        Homography(np.array([[1, 0, 0], [2, 0, 0], [0, 0, 1.0]]))
    h = Homography(np.array([[2.0, 0.1, 3], [0, 1.5, 1], [0, 0, 2]]))
    assert h.matrix[2, 2] == 1.0
    assert np.allclose(h.inverse().matrix @ h.matrix, np.eye(3))
    back = registration_from_dict(h.to_dict())
    assert np.allclose(back.matrix, h.matrix)


def test_warp_identity_translation_and_off_frame():
    img = scene(64, 1)
    out, valid = warp(img, Homography.identity())
    assert np.array_equal(out, img) and valid.all()
    out, valid = warp(img, Homography.translation(3, -2))
    ref, ref_valid = shift_image(img, 3, -2)
    assert np.array_equal(valid, ref_valid)
    assert np.array_equal(out[valid], ref[valid])
    out, valid = warp(img, Homography.translation(500, 0))
    assert not valid.any() and not out.any()
