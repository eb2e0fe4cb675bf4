"""Image similarity: pixel MSE, global-statistics SSIM, random-image baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .rng import Rng


@dataclass(frozen=True)
class SsimParams:
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _check(op: str, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(op, [a.shape, b.shape], "images must have identical shape")
    if a.size == 0:
        raise ShapeError(op, [a.shape, b.shape], "empty image")
    return a, b


def _channels(x: np.ndarray) -> np.ndarray:
    # (C,H,W) -> C rows; anything of lower rank is one channel
    if x.ndim == 3:
        return x.reshape(x.shape[0], -1)
    return x.reshape(1, -1)


def mse(a, b) -> float:
    a, b = _check("mse", a, b)
    d = _channels(a) - _channels(b)
    return float(np.mean(np.mean(d * d, axis=1)))


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """SSIM from whole-image statistics, averaged over channels.

    Variances and covariance use the population (1/M) normalisation.
    """
    a, b = _check("ssim", a, b)
    c1, c2 = params.c1, params.c2
    vals = []
    for ca, cb in zip(_channels(a), _channels(b)):
        mu_a, mu_b = ca.mean(), cb.mean()
        da, db = ca - mu_a, cb - mu_b
        var_a, var_b = np.mean(da * da), np.mean(db * db)
        cov = np.mean(da * db)
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def random_image_baseline(images: Sequence[np.ndarray], trials: int, rng: Rng,
                          params: SsimParams = SsimParams()) -> tuple[float, float]:
    """Mean (MSE, SSIM) of guessing a random *other* image of the dataset."""
    n = len(images)
    if n < 2:
        raise ValueError(f"baseline needs at least 2 images, got {n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    m_total = s_total = 0.0
    for _ in range(trials):
        i = rng.integers(n)
        j = rng.integers(n - 1)
        if j >= i:
            j += 1
        m_total += mse(images[j], images[i])
        s_total += ssim(images[j], images[i], params)
    return m_total / trials, s_total / trials
