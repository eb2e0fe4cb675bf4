import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dlglab.data import synth
from dlglab.errors import ShapeError
from dlglab.metrics import SsimParams, mse, random_image_baseline, ssim
from dlglab.rng import Rng


def naive_mse(a, b):
    total = 0.0
    c, h, w = a.shape
    for k in range(c):
        s = 0.0
        for i in range(h):
            for j in range(w):
                s += (a[k, i, j] - b[k, i, j]) ** 2
        total += s / (h * w)
    return total / c


def naive_ssim(a, b, c1=1e-4, c2=9e-4):
    vals = []
    for ca, cb in zip(a, b):
        xs, ys = list(ca.ravel()), list(cb.ravel())
        m = len(xs)
        mx, my = sum(xs) / m, sum(ys) / m
        vx = sum((v - mx) ** 2 for v in xs) / m
        vy = sum((v - my) ** 2 for v in ys) / m
        cov = sum((u - mx) * (v - my) for u, v in zip(xs, ys)) / m
        vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_identical_and_extremes():
    a = Rng(0).uniform01((1, 5, 5))
    assert mse(a, a) == 0.0
    assert ssim(a, a) == 1.0
    assert mse(np.zeros((3, 3)), np.ones((3, 3))) == 1.0


def test_constant_images_ssim():
    c1 = SsimParams().c1
    assert abs(ssim(np.zeros((4, 4)), np.ones((4, 4))) - c1 / (1 + c1)) < 1e-15
    assert abs(ssim(np.zeros((4, 4)), np.ones((4, 4))) - 9.999e-5) < 1e-8


def test_against_naive_oracles():
    rng = Rng(21)
    for _ in range(50):
        a, b = rng.uniform01((1, 8, 8)), rng.uniform01((1, 8, 8))
        assert abs(mse(a, b) - naive_mse(a, b)) <= 1e-15
        assert abs(ssim(a, b) - naive_ssim(a, b)) <= 1e-12


def test_multichannel_is_channel_mean():
    rng = Rng(2)
    a, b = rng.uniform01((3, 4, 4)), rng.uniform01((3, 4, 4))
    assert abs(mse(a, b) - np.mean([mse(a[k], b[k]) for k in range(3)])) < 1e-15
    assert abs(ssim(a, b) - np.mean([ssim(a[k], b[k]) for k in range(3)])) < 1e-15


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((2, 2)), np.zeros((3, 2)))


unit_images = arrays(np.float64, (1, 4, 4), elements=st.floats(-0.5, 1.5, allow_nan=False))


@given(unit_images, unit_images)
def test_symmetry_and_ranges(a, b):
    a, b = np.clip(a, 0, 1), np.clip(b, 0, 1)
    assert mse(a, b) == mse(b, a)
    assert 0.0 <= mse(a, b) <= 1.0
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-15
    assert -1.0 <= ssim(a, b) <= 1.0
    assert ssim(a, a) == 1.0


def test_baseline_identical_pair():
    im = Rng(0).uniform01((1, 4, 4))
    m, s = random_image_baseline([im, im.copy()], 20, Rng(1))
    assert m == 0.0 and s == 1.0


def test_baseline_uniform_noise():
    ds = synth("uniform_noise", (1, 16, 16), 100, 10, Rng(3))
    m, _ = random_image_baseline(ds.images, 2000, Rng(4))
    assert abs(m - 1 / 6) < 0.01


def test_baseline_never_picks_target():
    ims = [np.full((1, 2, 2), v) for v in (0.0, 1.0)]
    # any self-pick would pull the mean below 1
    m, _ = random_image_baseline(ims, 500, Rng(9))
    assert m == 1.0


def test_baseline_needs_two_images():
    with pytest.raises(ValueError):
        random_image_baseline([np.zeros((2, 2))], 5, Rng(0))
