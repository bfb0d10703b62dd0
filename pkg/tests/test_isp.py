from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flarekit.errors import CodecError, ConfigurationError, InvalidMetadataError
from flarekit.isp import (FRONTEND_STAGES, PRESETS, Mosaic, PipelineConfig, RawImage, RawMetadata,
                          augment_config, black_level_correct, cfa_index_image, color_correct,
                          demosaic_bilinear, denoise, jpeg_roundtrip, linearize, pipeline_config_preset,
                          run_backend, run_pipeline, sharpen_usm, srgb_decode, srgb_encode, tone_map,
                          white_balance)
from flarekit.metrics import psnr
from flarekit.removal import FlareRemover

from conftest import textured

META10 = RawMetadata(bit_depth=10, black_level=(64, 64, 64, 64), white_level=1023,
                     wb_gains=(1.0, 1.0, 1.0))


def raw_of(values, meta=META10):
    return RawImage(np.asarray(values, dtype=np.uint16), meta)


# ------------------------------------------------------------- metadata

@pytest.mark.parametrize("kwargs", [
    dict(cfa="RGBG"),
    dict(bit_depth=8),
    dict(black_level=(64, 64, 64)),
    dict(black_level=(4095, 0, 0, 0)),
    dict(white_level=5000),
    dict(wb_gains=(1.0, 0.0, 1.0)),
    dict(wb_gains=(1.0, float("nan"), 1.0)),
    dict(color_matrix=((1, 0, 0), (0, 1, 0))),
])
def test_metadata_rejects_invalid(kwargs):
    with pytest.raises(InvalidMetadataError):
        RawMetadata(**kwargs)


def test_metadata_round_trip_and_missing_field():
    meta = RawMetadata(cfa="GBRG", black_level=(10, 11, 12, 13))
    assert RawMetadata.from_dict(meta.to_dict()) == meta
    d = meta.to_dict()
    del d["white_level"]
    with pytest.raises(InvalidMetadataError, match="white_level"):
        RawMetadata.from_dict(d)


def test_raw_image_invariants():
    with pytest.raises(InvalidMetadataError):
        RawImage(np.zeros((3, 4), np.uint16))
    with pytest.raises(InvalidMetadataError):
        RawImage(np.full((4, 4), 5000, np.uint16))
    raw = RawImage(np.zeros((4, 4), np.uint16))
    with pytest.raises(ValueError):
        raw.pixels[0, 0] = 1


# ------------------------------------------------------------- front-end

@pytest.mark.parametrize("count,expected", [(64, 0.0), (1023, 1.0), (543, (543 - 64) / 959)])
def test_black_level_examples(count, expected):
    m = black_level_correct(raw_of(np.full((2, 2), count)))
    assert np.allclose(m.data, expected)
    if count == 543:
        assert abs(m.data[0, 0] - 0.49948) < 1e-5


def test_black_level_per_site_and_clipping():
    meta = RawMetadata(bit_depth=10, black_level=(60, 62, 64, 66), white_level=1023)
    m = black_level_correct(RawImage(np.array([[60, 62], [0, 1023]], np.uint16), meta))
    assert m.data[0, 0] == 0 and m.data[0, 1] == 0 and m.data[1, 0] == 0
    assert m.data[1, 1] == 1.0


def test_white_balance_examples():
    data = np.full((2, 2), 0.2)
    assert np.array_equal(white_balance(Mosaic(data, "RGGB"), (1, 1, 1)).data, data)
    assert white_balance(Mosaic(data, "RGGB"), (2, 1, 1.5)).data[0, 0] == pytest.approx(0.4)
    assert white_balance(Mosaic(data, "GBRG"), (2, 1, 1.5)).data[0, 0] == pytest.approx(0.2)
    assert white_balance(Mosaic(data, "BGGR"), (2, 1, 1.5)).data[0, 0] == pytest.approx(0.3)
    with pytest.raises(InvalidMetadataError):
        white_balance(Mosaic(data, "RGGB"), (1, -1, 1))


@pytest.mark.parametrize("cfa", ["RGGB", "BGGR", "GRBG", "GBRG"])
def test_demosaic_constant(cfa):
    out = demosaic_bilinear(Mosaic(np.full((8, 10), 0.25), cfa))
    assert out.shape == (8, 10, 3)
    assert np.array_equal(out, np.full((8, 10, 3), 0.25))


def test_demosaic_periodic_tile_interior():
    idx = cfa_index_image("RGGB", 12, 12)
    data = np.choose(idx, [0.8, 0.4, 0.2])
    out = demosaic_bilinear(Mosaic(data, "RGGB"))
    assert np.allclose(out[1:-1, 1:-1], (0.8, 0.4, 0.2), atol=1e-12)


def _demosaic_oracle(data, cfa):
    """Direct per-pixel bilinear interpolation with mirrored borders."""
    h, w = data.shape
    idx = cfa_index_image(cfa, h, w)

    def at(y, x):
        y = -y if y < 0 else (2 * (h - 1) - y if y >= h else y)
        x = -x if x < 0 else (2 * (w - 1) - x if x >= w else x)
        return data[y, x], idx[y, x]

    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            for c in range(3):
                v, ch = at(y, x)
                if ch == c:
                    out[y, x, c] = v
                    continue
                vals = []
                for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                    v2, c2 = at(y + dy, x + dx)
                    if c2 == c:
                        vals.append(v2)
                if not vals:
                    for dy, dx in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                        v2, c2 = at(y + dy, x + dx)
                        if c2 == c:
                            vals.append(v2)
                out[y, x, c] = np.mean(vals)
    return out


@pytest.mark.parametrize("cfa", ["RGGB", "GBRG"])
def test_demosaic_matches_direct_oracle(cfa):
    data = np.random.default_rng(3).random((6, 8))
    assert np.allclose(demosaic_bilinear(Mosaic(data, cfa)), _demosaic_oracle(data, cfa), atol=1e-12)


def test_demosaic_minimum_size():
    out = demosaic_bilinear(Mosaic(np.array([[0.1, 0.2], [0.3, 0.4]]), "RGGB"))
    assert out.shape == (2, 2, 3) and np.all(np.isfinite(out))


def test_color_correct_examples():
    px = np.array([[[0.5, 0.0, 0.0]]])
    assert np.array_equal(color_correct(px, np.eye(3)), px)
    m = np.eye(3)
    m[0] *= 2
    assert np.allclose(color_correct(px, m), [[[1.0, 0, 0]]])
    gray_matrix = np.array([[1.3, -0.2, -0.1], [-0.1, 1.2, -0.1], [0.0, -0.3, 1.3]])
    g = np.full((1, 1, 3), 0.3)
    assert np.allclose(color_correct(g, gray_matrix), g)


def test_tone_map_examples():
    assert tone_map(np.array([0.0, 1.0, 1.7, 0.18])).tolist() == [0, 255, 255, 118]
    assert srgb_encode(0.18) == pytest.approx(0.46135, abs=1e-5)
    assert linearize(np.array([0, 255], np.uint8)).tolist() == [0.0, 1.0]
    # closed-form inverse transfer of 118/255
    expected = ((118 / 255 + 0.055) / 1.055) ** 2.4
    assert linearize(np.array([118], np.uint8))[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.18116, abs=1e-5)


def test_tone_map_inverts_linearize_on_all_codes():
    codes = np.arange(256, dtype=np.uint8)
    assert np.array_equal(tone_map(linearize(codes)), codes)


@given(st.floats(0, 1, allow_nan=False))
def test_srgb_decode_inverts_encode(x):
    assert srgb_decode(srgb_encode(x)) == pytest.approx(x, abs=1e-12)


@given(hnp.arrays(np.float64, (5,), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, (5,), elements=st.floats(0, 1)))
def test_tone_map_monotone(a, b):
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(tone_map(lo) <= tone_map(hi))


# ---------------------------------------------------------------- stages

def test_denoise_identities_and_noise_reduction():
    img = textured()
    assert np.array_equal(denoise(img, 0), img)
    const = np.full((20, 20, 3), 77, np.uint8)
    assert np.array_equal(denoise(const, 2.0), const)
    rng = np.random.default_rng(0)
    noisy = np.clip(128 + rng.normal(0, 10, (64, 64, 3)), 0, 255).astype(np.uint8)
    assert denoise(noisy, 1.0).std() < noisy.std()
    with pytest.raises(ConfigurationError):
        denoise(img, -1)


def test_sharpen_identities_and_overshoot():
    img = textured()
    assert np.array_equal(sharpen_usm(img, 0, 1.5), img)
    const = np.full((20, 20, 3), 99, np.uint8)
    assert np.array_equal(sharpen_usm(const, 2.0, 1.5), const)
    step = np.zeros((16, 32, 3), np.uint8)
    step[:, 16:] = 200
    out = sharpen_usm(step, 1.0, 1.5)
    assert out.max() > 200 and out.max() <= 255


def test_sharpen_matches_formula_oracle():
    from scipy import ndimage

    img = textured(40, 40, seed=5)
    amount, radius = 0.7, 1.2
    f = img.astype(np.float64)
    blur = np.stack([ndimage.gaussian_filter(f[..., c], radius, mode="reflect") for c in range(3)], 2)
    expected = np.clip(np.floor(f + amount * (f - blur) + 0.5), 0, 255)
    assert np.array_equal(sharpen_usm(img, amount, radius), expected.astype(np.uint8))


def test_jpeg_examples():
    img = textured(64, 64)
    assert jpeg_roundtrip(img, 50).shape == img.shape
    gray = np.full((16, 16, 3), 128, np.uint8)
    assert psnr(gray, jpeg_roundtrip(gray, 95)) >= 50
    scores = [psnr(img, jpeg_roundtrip(img, q)) for q in (90, 70, 50, 30, 20)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    with pytest.raises(ConfigurationError):
        jpeg_roundtrip(img, 0)


def test_jpeg_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        jpeg_roundtrip(np.zeros((8, 8), np.uint8), 50)
    assert issubclass(CodecError, Exception)


# ---------------------------------------------------------------- config

def test_presets():
    assert PRESETS[1] == ("denoise", "flare_removal", "sharpen", "compression")
    assert PRESETS[3] == ("denoise", "sharpen", "compression", "flare_removal")
    assert PRESETS[4] == ("sharpen", "compression", "flare_removal")
    assert pipeline_config_preset(2).backend_order == PRESETS[2]
    with pytest.raises(ConfigurationError):
        pipeline_config_preset(5)


@pytest.mark.parametrize("kwargs", [
    dict(backend_order=("denoise", "denoise")),
    dict(backend_order=("blur",)),
    dict(sharpen_amount=3.5),
    dict(sharpen_radius=0),
    dict(jpeg_quality=101),
    dict(denoise_strength=-0.1),
    dict(backend_order=("denoise",), config_id=1),
    dict(removal_domain="log"),
])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigurationError):
        PipelineConfig(**kwargs)


def test_config_dict_round_trip_and_preset_key():
    cfg = pipeline_config_preset(3, jpeg_quality=70)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert PipelineConfig.from_dict({"preset": 4}).backend_order == PRESETS[4]
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict({"nonsense": 1})


def test_augment_config_ranges():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = augment_config(PipelineConfig(), rng)
        assert 0.5 <= c.sharpen_amount <= 2.0 and 50 <= c.jpeg_quality <= 80


# -------------------------------------------------------------- pipeline

def _raw(seed=0, size=32):
    rng = np.random.default_rng(seed)
    return RawImage(rng.integers(256, 4096, (size, size)).astype(np.uint16), RawMetadata())


def test_empty_backend_is_frontend_only():
    out, trace = run_pipeline(_raw(), PipelineConfig())
    assert trace.stages == list(FRONTEND_STAGES)
    assert out.dtype == np.uint8 and out.shape == (32, 32, 3)


def test_preset_traces_and_determinism():
    raw = _raw(1)
    out1, t1 = run_pipeline(raw, pipeline_config_preset(1), FlareRemover("identity"))
    out2, t2 = run_pipeline(raw, pipeline_config_preset(1), FlareRemover("identity"))
    assert t1.stages[-4:] == ["denoise", "flare_removal", "sharpen", "compression"]
    assert np.array_equal(out1, out2) and t1.to_json() == t2.to_json()
    _, t3 = run_pipeline(raw, pipeline_config_preset(3), FlareRemover("identity"))
    assert t3.stages[-4:] == list(PRESETS[3])


def test_removal_stage_requires_remover():
    with pytest.raises(ConfigurationError):
        run_pipeline(_raw(), pipeline_config_preset(1))


def test_backend_orders_differ():
    img = textured(48, 48)
    a = run_backend(img, PipelineConfig(backend_order=("sharpen", "compression")))
    b = run_backend(img, PipelineConfig(backend_order=("compression", "sharpen")))
    assert not np.array_equal(a, b)
