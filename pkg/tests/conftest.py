from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def textured(h: int = 96, w: int = 96, seed: int = 0) -> np.ndarray:
    """Smooth random texture, uint8 (h, w, 3)."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.random((h, w, 3)), sigma=(2.0, 2.0, 0))
    base = (base - base.min()) / (base.max() - base.min())
    return np.floor(20 + 215 * base).astype(np.uint8)


@pytest.fixture
def texture():
    return textured()
