"""Fixed-step L-BFGS and AdamW over a flat float64 variable.

One call to ``step`` is one attack iteration: no line search, no inner
function evaluations.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


def _finite_grad(g: np.ndarray, who: str) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"{who}: non-finite gradient")
    return g


@dataclass
class LBFGS:
    lr: float
    history: int = 20
    curvature_eps: float = 1e-10
    pairs: deque = field(default_factory=deque, repr=False)
    x_prev: np.ndarray | None = field(default=None, repr=False)
    g_prev: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        self.pairs = deque(self.pairs, maxlen=self.history)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a curvature pair; rejected (returns False) unless ``s·y > curvature_eps``."""
        if not float(s @ y) > self.curvature_eps:
            return False
        self.pairs.append((np.array(s, dtype=np.float64), np.array(y, dtype=np.float64)))
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        """``-H g`` by the two-loop recursion; ``-g`` with no history."""
        q = np.array(g, dtype=np.float64)
        if not self.pairs:
            return -q
        alphas = []
        for s, y in reversed(self.pairs):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            q -= a * y
            alphas.append((rho, a))
        s_k, y_k = self.pairs[-1]
        q *= float(s_k @ y_k) / float(y_k @ y_k)
        for (s, y), (rho, a) in zip(self.pairs, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        g = _finite_grad(g, "lbfgs")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != g.shape:
            raise ValueError(f"lbfgs: x {x.shape} and g {g.shape} differ")
        if self.x_prev is not None:
            self.push(x - self.x_prev, g - self.g_prev)
        x_new = x + self.lr * self.direction(g)
        self.x_prev, self.g_prev = x.copy(), g.copy()
        return x_new


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        g = _finite_grad(g, "adamw")
        x = np.asarray(x, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        x = x - self.lr * self.weight_decay * x if self.weight_decay else x.copy()
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def lbfgs_step(state: LBFGS, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return state.step(x, g)


def adamw_step(state: AdamW, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return state.step(x, g)


def make_optimizer(name: str, lr: float, *, weight_decay: float = 0.0, history: int = 20):
    if name == "lbfgs":
        return LBFGS(lr, history=history)
    if name == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}; expected lbfgs or adamw")
