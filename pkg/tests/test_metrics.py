"""Image quality metrics against independent loop-based oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mmsynth as mm


def _loop_psnr(a, b, max_val=1.0):
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (float(a[idx]) - float(b[idx])) ** 2
    mse = total / a.size
    if mse == 0.0:
        return 100.0
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size=7, sigma=1.5):
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(coords**2) / (2 * sigma * sigma))
    k /= k.sum()
    return np.outer(k, k)


def _loop_ssim(a, b, c1=0.01**2, c2=0.03**2):
    """Windowed similarity computed position by position."""
    win = _gaussian_window()
    size = win.shape[0]
    h, w = a.shape
    values = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            pa = a[i:i + size, j:j + size].astype(np.float64)
            pb = b[i:i + size, j:j + size].astype(np.float64)
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            var_a = (win * pa * pa).sum() - mu_a * mu_a
            var_b = (win * pb * pb).sum() - mu_b * mu_b
            cov = (win * pa * pb).sum() - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            values.append(num / den)
    return float(np.mean(values))


# ----------------------------------------------------------------- psnr


def test_psnr_identical_images_capped():
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert mm.psnr(x, x) == 100.0


def test_psnr_constant_offset_is_twenty_db():
    x = np.full((8, 8), 0.3)
    assert mm.psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_loop_oracle():
    g = np.random.default_rng(1)
    for _ in range(5):
        a = g.uniform(size=(12, 12))
        b = g.uniform(size=(12, 12))
        assert mm.psnr(a, b) == pytest.approx(_loop_psnr(a, b), abs=1e-6)


def test_psnr_respects_max_val():
    g = np.random.default_rng(2)
    a = g.uniform(size=(8, 8)) * 255
    b = g.uniform(size=(8, 8)) * 255
    assert mm.psnr(a, b, max_val=255.0) == pytest.approx(
        _loop_psnr(a, b, max_val=255.0), abs=1e-6)


@given(seed=st.integers(min_value=0, max_value=9999))
@settings(max_examples=40)
def test_psnr_symmetric(seed):
    g = np.random.default_rng(seed)
    a = g.uniform(size=(6, 6))
    b = g.uniform(size=(6, 6))
    assert mm.psnr(a, b) == pytest.approx(mm.psnr(b, a), rel=1e-12)


def test_psnr_validation():
    with pytest.raises(ValueError):
        mm.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        mm.psnr(np.zeros((4, 4)), np.zeros((4, 4)), max_val=0.0)


# ----------------------------------------------------------------- ssim


def test_ssim_identical_images_is_one():
    x = np.random.default_rng(3).uniform(size=(16, 16))
    assert mm.ssim(x, x) == 1.0


def test_ssim_luminance_shift_bounded():
    a = np.full((16, 16), 0.25)
    b = a + 0.5
    value = mm.ssim(a, b)
    assert 0.0 <= value < 1.0


def test_ssim_matches_loop_oracle():
    g = np.random.default_rng(4)
    for _ in range(3):
        a = g.uniform(size=(14, 14))
        b = np.clip(a + 0.1 * g.standard_normal(a.shape), 0, 1)
        assert mm.ssim(a, b) == pytest.approx(_loop_ssim(a, b), abs=1e-6)


def test_ssim_symmetric():
    g = np.random.default_rng(5)
    a = g.uniform(size=(10, 10))
    b = g.uniform(size=(10, 10))
    assert mm.ssim(a, b) == pytest.approx(mm.ssim(b, a), rel=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        mm.ssim(np.zeros((6, 6)), np.zeros((6, 6)))
    with pytest.raises(ValueError):
        mm.ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_ssim_detects_structure_loss():
    g = np.random.default_rng(6)
    a = g.uniform(size=(16, 16))
    shuffled = g.permutation(a.ravel()).reshape(a.shape)
    assert mm.ssim(a, shuffled) < 0.5


def test_ssim_within_valid_range():
    g = np.random.default_rng(7)
    for _ in range(5):
        a = g.uniform(size=(9, 9))
        b = g.uniform(size=(9, 9))
        assert -1.0 <= mm.ssim(a, b) <= 1.0
