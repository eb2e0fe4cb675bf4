"""Gradient-matching reconstruction of a private example.

The loop: draw a dummy image and dummy label logits, compute the model's
parameter gradients at the dummy (kept on the tape), measure their distance
to the shared gradients, and move the dummy down the gradient of that
distance.  The distance is one of

* ``eucl``  - squared Euclidean norm over all gradient entries;
* ``gauss`` - per-layer ``w_i (1 - exp(-||dW_i||^2 / lambda2))`` with one fixed
  ``lambda2`` and ``w_i = 1/i``;
* ``ag``    - the same kernel with ``lambda2_i = n_i * Var(target grad of layer i)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Var
from .errors import ConfigError, LabError, ShapeError
from .metrics import mse, ssim
from .models import GradientSet, Model, forward_loss
from .optim import make_optimizer
from .rng import Rng

INIT_SCHEMES = {"tg": "standard_normal", "unif": "uniform01"}
MEASURES = ("eucl", "gauss", "ag")
OPTIMIZERS = ("lbfgs", "adamw")
LAMBDA2_FLOOR = 1e-12
DEFAULT_TAU = 0.1
RELATIVE_LOSS_TOL = 1e-7


@dataclass(frozen=True)
class MeasureConfig:
    kind: str = "eucl"
    lambda2: float | None = None
    floor: float = LAMBDA2_FLOOR

    def __post_init__(self) -> None:
        if self.kind not in MEASURES:
            raise ConfigError(f"unknown measure {self.kind!r}; accepted values {{{', '.join(MEASURES)}}}")
        if self.kind == "gauss":
            if self.lambda2 is None or not self.lambda2 > 0 or not math.isfinite(self.lambda2):
                raise ConfigError(f"gauss measure needs a finite lambda2 > 0, got {self.lambda2}")

    @property
    def label(self) -> str:
        if self.kind == "gauss":
            return f"gauss{self.lambda2:g}"
        return self.kind


@dataclass(frozen=True)
class AttackConfig:
    init: str = "tg"
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    optimizer: str = "lbfgs"
    lr: float = 0.1
    iterations: int = 100
    seed: int = 0
    tau: float = DEFAULT_TAU
    weight_decay: float = 0.0
    history: int = 20

    def __post_init__(self) -> None:
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init {self.init!r}; accepted values {{tg, unif}}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; accepted values {{lbfgs, adamw}}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")

    @property
    def label(self) -> str:
        return f"{self.init}-{self.measure.label}-{self.optimizer}-lr{self.lr:g}"


@dataclass(frozen=True)
class IterRecord:
    """``loss`` is L_G at the point the step started from; ``mse``/``ssim``
    describe the (clamped) image after the step."""

    iter: int
    loss: float
    mse: float
    ssim: float


@dataclass
class AttackTrace:
    records: list[IterRecord]
    x_init: np.ndarray
    y_init: np.ndarray
    x_final: np.ndarray
    y_final: np.ndarray
    initial_loss: float
    final_loss: float
    final_mse: float
    final_ssim: float
    has_ground_truth: bool
    converged: bool = False
    reason: str = ""
    wallclock: float = 0.0
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def aborted(self) -> bool:
        return bool(self.reason)


# ---------------------------------------------------------------------------
# initialization


def rescale01(v: np.ndarray) -> np.ndarray:
    """Affine map of ``v`` onto [0, 1]; a constant draw maps to 0.5."""
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi == lo:
        return np.full(np.shape(v), 0.5)
    return (v - lo) / (hi - lo)


def init_dummy(shape_x, classes: int, scheme: str, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init {scheme!r}; accepted values {{tg, unif}}")
    dist = INIT_SCHEMES[scheme]
    draw = rng.standard_normal if dist == "standard_normal" else rng.uniform01
    x = rescale01(draw(tuple(shape_x)))
    y = rescale01(draw((classes,)))
    return x, y


# ---------------------------------------------------------------------------
# distance measures


def _as_list(gs) -> list:
    if isinstance(gs, GradientSet):
        return gs.arrays()
    return list(gs)


def _graph_for(*seqs) -> Graph:
    for seq in seqs:
        for t in seq:
            if isinstance(t, Var):
                return t.graph
    return Graph()


def _lift_all(graph: Graph, seq) -> list[Var]:
    return [t if isinstance(t, Var) else graph.input(t) for t in seq]


def _sq_norm(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError("distance", [a.shape, b.shape], "gradient sets are not aligned")
    d = ad.sub(a, b)
    return ad.sum(ad.mul(d, d))


def _align(ga, gb):
    la, lb = _as_list(ga), _as_list(gb)
    if len(la) != len(lb):
        raise ShapeError("distance", [(len(la),), (len(lb),)], "gradient sets differ in length")
    g = _graph_for(la, lb)
    return g, _lift_all(g, la), _lift_all(g, lb)


def distance_eucl(ga, gb) -> Var:
    """Sum over every entry of ``(ga - gb)**2``; no layer weighting."""
    g, la, lb = _align(ga, gb)
    terms = [_sq_norm(a, b) for a, b in zip(la, lb)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _groups(layer_ids: Sequence[int] | None, n: int) -> list[list[int]]:
    if layer_ids is None:
        return [[i] for i in range(n)]
    order: dict[int, list[int]] = {}
    for pos, lid in enumerate(layer_ids):
        order.setdefault(lid, []).append(pos)
    return list(order.values())


def distance_gauss(ga, gb, lambda2: Sequence[float], weights: Sequence[float],
                   layer_ids: Sequence[int] | None = None) -> Var:
    """``sum_i w_i (1 - exp(-||ga_i - gb_i||^2 / lambda2_i))`` over layers.

    Tensors sharing a layer id (weight and bias) form one layer.  Without
    ``layer_ids`` (and when ``gb`` is not a GradientSet) each tensor is its
    own layer.
    """
    if layer_ids is None and isinstance(gb, GradientSet):
        layer_ids = gb.layer_ids()
    g, la, lb = _align(ga, gb)
    groups = _groups(layer_ids, len(la))
    if len(lambda2) != len(groups) or len(weights) != len(groups):
        raise ConfigError(f"need one lambda2 and weight per layer ({len(groups)}), got {len(lambda2)} / {len(weights)}")
    total = None
    for members, lam, w in zip(groups, lambda2, weights):
        if not lam > 0:
            raise ConfigError(f"lambda2 must be > 0, got {lam}")
        if not w > 0:
            raise ConfigError(f"layer weight must be > 0, got {w}")
        d = _sq_norm(la[members[0]], lb[members[0]])
        for m in members[1:]:
            d = ad.add(d, _sq_norm(la[m], lb[m]))
        term = ad.scale(ad.sub(1.0, ad.exp(ad.scale(d, -1.0 / lam))), w)
        total = term if total is None else ad.add(total, term)
    return total


def lambda_adaptive(g_layer, floor: float = LAMBDA2_FLOOR) -> float:
    """``n * Var(g)`` (population variance over the flattened layer), floored."""
    if isinstance(g_layer, (list, tuple)):
        flat = np.concatenate([np.ravel(t) for t in g_layer])
    else:
        flat = np.ravel(g_layer)
    n = flat.size
    if n < 1:
        raise ValueError("empty gradient layer")
    return max(n * float(np.var(flat)), floor)


def layer_weights(target: GradientSet) -> list[float]:
    """``w_i = 1/i`` for layer number ``i`` (1-based)."""
    return [1.0 / lid for lid in target.by_layer()]


def layer_lambdas(target: GradientSet, measure: MeasureConfig) -> list[float]:
    layers = target.by_layer()
    if measure.kind == "ag":
        return [lambda_adaptive(ts, measure.floor) for ts in layers.values()]
    if measure.kind == "gauss":
        return [float(measure.lambda2)] * len(layers)
    raise ConfigError("lambda2 only applies to gauss / ag measures")


def matching_loss(dummy_grads: Sequence[Var], target: GradientSet, measure: MeasureConfig,
                  lambda2: Sequence[float] | None = None) -> Var:
    if measure.kind == "eucl":
        return distance_eucl(dummy_grads, target)
    if lambda2 is None:
        lambda2 = layer_lambdas(target, measure)
    return distance_gauss(dummy_grads, target, lambda2, layer_weights(target))


def gradient_matching(model: Model, target: GradientSet, x: np.ndarray, y_logits: np.ndarray,
                      measure: MeasureConfig, lambda2: Sequence[float] | None = None,
                      with_grad: bool = True):
    """L_G at dummy ``(x, y_logits)`` and, optionally, its gradients w.r.t. both."""
    g = Graph()
    xv, yv = g.input(x), g.input(y_logits)
    params = model.bind(g)
    loss = forward_loss(model, xv, yv, params)
    dummy = ad.backward(g, loss, params, create_graph=True)
    lg = matching_loss(dummy, target, measure, lambda2)
    if not with_grad:
        return float(lg.value)
    gx, gy = ad.backward(g, lg, [xv, yv])
    return float(lg.value), gx, gy


# ---------------------------------------------------------------------------
# reconstruction loop


def snapshot_iters(n: int) -> list[int]:
    return sorted({0, n // 4, n // 2, (3 * n) // 4, n})


def is_converged(trace: AttackTrace, tau: float = DEFAULT_TAU) -> bool:
    """Final clamped MSE ``<= tau`` (inclusive); without ground truth, final L_G
    ``<= 1e-7`` times the initial L_G.  Any non-finite loss means False."""
    if not trace.records:
        return False
    if trace.aborted:
        return False
    losses = [r.loss for r in trace.records] + [trace.final_loss]
    if not all(math.isfinite(v) for v in losses):
        return False
    if trace.has_ground_truth:
        return math.isfinite(trace.final_mse) and trace.final_mse <= tau
    return trace.final_loss <= RELATIVE_LOSS_TOL * trace.initial_loss


def _quality(x: np.ndarray, truth: np.ndarray | None) -> tuple[float, float]:
    if truth is None:
        return math.nan, math.nan
    xc = np.clip(x, 0.0, 1.0)
    return mse(xc, truth), ssim(xc, truth)


def reconstruct(model: Model, target: GradientSet, cfg: AttackConfig,
                ground_truth: np.ndarray | None = None,
                x_init: np.ndarray | None = None, y_init: np.ndarray | None = None) -> AttackTrace:
    """Run the attack for ``cfg.iterations`` steps.

    ``x_init`` / ``y_init`` override the seeded dummy draw (both or neither).
    Numeric failures never raise: the trace is cut at the failing iteration,
    ``reason`` says why, and the run counts as non-converged.
    """
    if len(target.entries) != len(model.params.tensors()):
        raise ShapeError("reconstruct", [(len(target.entries),), (len(model.params.tensors()),)],
                         "gradient set does not match model")
    for (_, t), (_, p) in zip(target.entries, model.params.tensors()):
        if t.shape != p.shape:
            raise ShapeError("reconstruct", [t.shape, p.shape], "gradient set does not match model")
    if ground_truth is not None:
        ground_truth = np.asarray(ground_truth, dtype=np.float64)

    start = time.perf_counter()
    rng = Rng(cfg.seed)
    if x_init is None:
        x, y = init_dummy(model.in_shape, model.classes, cfg.init, rng)
    else:
        x = np.array(x_init, dtype=np.float64)
        y = np.array(y_init, dtype=np.float64)
    x0, y0 = x.copy(), y.copy()
    nx = x.size
    z = np.concatenate([x.ravel(), y.ravel()])
    opt = make_optimizer(cfg.optimizer, cfg.lr, weight_decay=cfg.weight_decay, history=cfg.history)
    lambda2 = None if cfg.measure.kind == "eucl" else layer_lambdas(target, cfg.measure)

    snaps = set(snapshot_iters(cfg.iterations))
    snapshots = {0: np.clip(x0, 0.0, 1.0)} if 0 in snaps else {}
    records: list[IterRecord] = []
    reason = ""
    initial_loss = math.nan

    def unpack(zz):
        return zz[:nx].reshape(x0.shape), zz[nx:]

    with np.errstate(all="ignore"):
        for it in range(1, cfg.iterations + 1):
            xc, yc = unpack(z)
            try:
                loss, gx, gy = gradient_matching(model, target, xc, yc, cfg.measure, lambda2)
            except LabError as exc:
                loss, reason = math.nan, f"iteration {it}: {exc}"
            if it == 1:
                initial_loss = loss
            if not reason and not math.isfinite(loss):
                reason = f"iteration {it}: non-finite loss"
            if reason:
                records.append(IterRecord(it, loss, math.nan, math.nan))
                break
            grad = np.concatenate([gx.ravel(), gy.ravel()])
            try:
                z = opt.step(z, grad)
            except LabError as exc:
                reason = f"iteration {it}: {exc}"
                records.append(IterRecord(it, loss, math.nan, math.nan))
                break
            xn, _ = unpack(z)
            if not np.all(np.isfinite(z)):
                reason = f"iteration {it}: non-finite dummy after step"
                records.append(IterRecord(it, loss, math.nan, math.nan))
                break
            m, s = _quality(xn, ground_truth)
            records.append(IterRecord(it, loss, m, s))
            if it in snaps:
                snapshots[it] = np.clip(xn, 0.0, 1.0)

        xf, yf = unpack(z)
        if reason:
            final_loss = math.nan
        else:
            try:
                final_loss = gradient_matching(model, target, xf, yf, cfg.measure, lambda2, with_grad=False)
            except LabError as exc:
                final_loss, reason = math.nan, f"final evaluation: {exc}"
    fm, fs = _quality(xf, ground_truth) if not reason else (math.nan, math.nan)

    trace = AttackTrace(
        records=records, x_init=x0, y_init=y0, x_final=xf.copy(), y_final=yf.copy(),
        initial_loss=initial_loss, final_loss=final_loss, final_mse=fm, final_ssim=fs,
        has_ground_truth=ground_truth is not None, reason=reason, snapshots=snapshots,
    )
    trace.converged = is_converged(trace, cfg.tau)
    trace.wallclock = time.perf_counter() - start
    return trace
