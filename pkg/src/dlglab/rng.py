"""Portable seeded random streams: splitmix64 integers, Box-Muller normals.

Only exact 64-bit integer arithmetic feeds the uniform draws, so a seed
produces the same stream on every platform.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64(*words: int) -> int:
    """Deterministic 64-bit hash of a tuple of integers (used for run seeds)."""
    h = 0
    for w in words:
        h = (h ^ (int(w) & MASK64)) & MASK64
        h = (h + GOLDEN) & MASK64
        h = int(_mix(np.array([h], dtype=np.uint64))[0])
    return h


class Rng:
    """splitmix64 generator; the state is a 64-bit counter."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix(z)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform01(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def standard_normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform01((pairs, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()
        return z[:n].reshape(shape)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)``; ``size`` may be an int or a shape."""
        n = (1,) if size is None else size
        k = np.floor(self.uniform01(n) * high).astype(np.int64)
        k = np.minimum(k, high - 1)
        return int(k[0]) if size is None else k

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def spawn(self, *words: int) -> "Rng":
        return Rng(mix64(self.state, *words))


def sample(rng: Rng, shape, dist: str = "uniform01") -> np.ndarray:
    if dist == "uniform01":
        return rng.uniform01(shape)
    if dist == "standard_normal":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown distribution {dist!r}; expected uniform01 or standard_normal")
