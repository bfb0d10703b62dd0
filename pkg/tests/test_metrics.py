from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from flarekit.metrics import SSIM_C1, mse, psnr, ssim

from conftest import textured


def test_psnr_closed_forms():
    a = np.full((16, 16, 3), 100, np.uint8)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 10) == pytest.approx(20 * math.log10(255 / 10), abs=1e-9)
    assert psnr(a, a + 10) == pytest.approx(28.131, abs=1e-3)
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 255)) == pytest.approx(0.0, abs=1e-12)


def test_psnr_mask_and_shape_errors():
    a = np.zeros((4, 4))
    b = a.copy()
    b[0, 0] = 50
    mask = np.zeros((4, 4), bool)
    mask[1:, 1:] = True
    assert psnr(a, b, mask) == math.inf
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5)))
    with pytest.raises(ValueError):
        mse(a, b, np.zeros((4, 4), bool))


def test_psnr_matches_skimage():
    a, b = textured(seed=1), textured(seed=2)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=255), abs=1e-9)


def test_ssim_closed_forms():
    img = textured()
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    zero, full = np.zeros((32, 32)), np.full((32, 32), 255.0)
    expected = SSIM_C1 / (255.0 ** 2 + SSIM_C1)
    assert expected == pytest.approx(1.0e-4, rel=0.1)
    assert ssim(zero, full) == pytest.approx(expected, rel=1e-9)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_matches_skimage_gaussian_window():
    a, b = textured(64, 64, seed=3), textured(64, 64, seed=4)
    ref = structural_similarity(a, b, channel_axis=2, data_range=255, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(s1, s2):
    a, b = textured(24, 24, seed=s1), textured(24, 24, seed=s2)
    v = ssim(a, b)
    assert v == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= v <= 1.0 + 1e-12


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_psnr_decreases_with_error(seed, k):
    a = textured(16, 16, seed=seed).astype(np.int16)
    small = np.clip(a + k, 0, 255)
    large = np.clip(a + 2 * k, 0, 255)
    if mse(a, large) > mse(a, small):
        assert psnr(a, large) < psnr(a, small)
