"""Finite-difference verification of first- and second-order derivatives.

Three scopes:

* ``primitives`` - every primitive, first order elementwise and second order
  (Hessian-vector product from double backward vs. central differences of
  the first-order gradient), on seeded random instances;
* ``models`` - victim parameter gradients of each architecture and the
  input Hessian-vector product through the model;
* ``attack-path`` - the gradient of the gradient-matching loss with respect
  to the dummy image, spot-checked on a few coordinates per measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .rng import Rng

FD_STEP = 1e-4
RTOL = 1e-5
ATOL = 1e-8
ATTACK_RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    order: int
    passed: bool
    max_err: float
    instances: int


@dataclass
class GradcheckReport:
    scope: str
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            tag = "PASS" if r.passed else "FAIL"
            out.append(f"{tag} {self.scope}:{r.name} order={r.order} n={r.instances} max_err={r.max_err:.3e}")
        return out


def close_error(a: np.ndarray, b: np.ndarray, rtol: float = RTOL, atol: float = ATOL) -> float:
    """Worst elementwise error, scaled so that <= 1 means within tolerance.

    An element passes when its absolute error is <= ``atol`` or its relative
    error (against the larger magnitude) is <= ``rtol``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        return np.inf
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return np.inf
    if a.size == 0:
        return 0.0
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, diff / scale, 0.0)
    # passes iff either ratio is <= 1; reporting the smaller keeps the margin visible
    score = np.minimum(diff / atol, rel / rtol)
    return float(score.max())


def central_difference(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], which: int,
                       coords=None, step: float = FD_STEP) -> np.ndarray:
    """∂f/∂xs[which] by central differences (optionally at selected flat coords)."""
    base = xs[which]
    flat = base.ravel()
    coords = range(flat.size) if coords is None else coords
    out = []
    for c in coords:
        plus = flat.copy()
        minus = flat.copy()
        plus[c] += step
        minus[c] -= step
        args_p = list(xs)
        args_m = list(xs)
        args_p[which] = plus.reshape(base.shape)
        args_m[which] = minus.reshape(base.shape)
        out.append((f(args_p) - f(args_m)) / (2 * step))
    return np.array(out)


# ---------------------------------------------------------------------------
# primitive cases: each returns (inputs, fn) with fn mapping Vars to a Var


def _signed_away(rng: Rng, shape, lo=1.0, hi=2.0):
    mag = lo + (hi - lo) * rng.uniform01(shape)
    sign = np.where(rng.uniform01(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _u(rng, shape, lo=-1.0, hi=1.0):
    return lo + (hi - lo) * rng.uniform01(shape)


def _away_from(rng, shape, eps, gap=0.05):
    x = _u(rng, shape)
    return np.where(np.abs(x - eps) < gap, x + 2 * gap, x)


PRIMITIVE_CASES: dict[str, Callable[[Rng], tuple[list[np.ndarray], Callable]]] = {
    "add": lambda r: ([_u(r, (3, 4)), _u(r, (3, 4))], lambda a, b: ad.add(a, b)),
    "sub": lambda r: ([_u(r, (3, 4)), _u(r, (3, 4))], lambda a, b: ad.sub(a, b)),
    "mul": lambda r: ([_u(r, (3, 4)), _u(r, (3, 4))], lambda a, b: ad.mul(a, b)),
    "div": lambda r: ([_u(r, (3, 4)), _signed_away(r, (3, 4))], lambda a, b: ad.div(a, b)),
    "matmul": lambda r: ([_u(r, (3, 4)), _u(r, (4, 2))], lambda a, b: ad.matmul(a, b)),
    "conv2d": lambda r: ([_u(r, (1, 2, 6, 6)), _u(r, (3, 2, 3, 3))], lambda x, w: ad.conv2d(x, w)),
    "conv2d_strided_padded": lambda r: (
        [_u(r, (2, 2, 7, 6)), _u(r, (2, 2, 3, 2))],
        lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
    ),
    "avgpool2": lambda r: ([_u(r, (1, 2, 5, 6))], lambda x: ad.avgpool2(x)),
    "sigmoid": lambda r: ([_u(r, (3, 4), -3, 3)], lambda x: ad.sigmoid(x)),
    "tanh": lambda r: ([_u(r, (3, 4), -2, 2)], lambda x: ad.tanh(x)),
    "exp": lambda r: ([_u(r, (3, 4))], lambda x: ad.exp(x)),
    "log": lambda r: ([_u(r, (3, 4), 0.5, 2.0)], lambda x: ad.log(x)),
    "sum": lambda r: ([_u(r, (2, 3, 4))], lambda x: ad.sum(x, axis=(0, 2))),
    "sum_all": lambda r: ([_u(r, (2, 3, 4))], lambda x: ad.sum(x)),
    "mean": lambda r: ([_u(r, (2, 3, 4))], lambda x: ad.mean(x, axis=1)),
    "reshape": lambda r: ([_u(r, (2, 6))], lambda x: ad.reshape(x, (3, 4))),
    "broadcast": lambda r: ([_u(r, (3, 1))], lambda x: ad.broadcast_to(x, (2, 3, 4))),
    "slice": lambda r: ([_u(r, (5, 6))], lambda x: x[1:5:2, ::-1]),
    "embed": lambda r: ([_u(r, (2, 3))], lambda x: ad.embed(x, (5, 4), (slice(1, 5, 2), slice(1, 4)))),
    "concat": lambda r: ([_u(r, (2, 3)), _u(r, (2, 2))], lambda a, b: ad.concat([a, b], axis=1)),
    "transpose": lambda r: ([_u(r, (2, 3, 4))], lambda x: ad.transpose(x, (2, 0, 1))),
    "scale": lambda r: ([_u(r, (3, 4))], lambda x: ad.scale(x, -1.7)),
    "neg": lambda r: ([_u(r, (3, 4))], lambda x: ad.neg(x)),
    "max_const": lambda r: ([_away_from(r, (3, 4), 0.1)], lambda x: ad.max_const(x, 0.1)),
}

COMPOSITE_CASES: dict[str, Callable[[Rng], tuple[list[np.ndarray], Callable]]] = {
    "sigmoid∘matmul": lambda r: ([_u(r, (2, 4)), _u(r, (4, 3))], lambda a, b: ad.sigmoid(ad.matmul(a, b))),
    "exp∘sum": lambda r: ([_u(r, (3, 4))], lambda x: ad.exp(ad.sum(x, axis=1))),
    "conv2d chain": lambda r: (
        [_u(r, (1, 1, 8, 8)), _u(r, (2, 1, 3, 3)), _u(r, (2, 2, 2, 2))],
        lambda x, k1, k2: ad.conv2d(ad.sigmoid(ad.conv2d(x, k1, padding=1)), k2, stride=2),
    ),
}


def _scalarize(out: ad.Var, r1: np.ndarray, r2: np.ndarray) -> ad.Var:
    # both linear and quadratic terms so that linear ops get a nonzero Hessian
    return ad.sum(ad.add(ad.mul(out, r1), ad.scale(ad.mul(ad.mul(out, out), r2), 0.5)))


def _check_case(name: str, build: Callable, rng: Rng, instances: int) -> list[CheckResult]:
    worst1 = worst2 = 0.0
    for _ in range(instances):
        inputs, fn = build(rng)
        g0 = ad.Graph()
        shape = fn(*[g0.input(x) for x in inputs]).shape
        r1 = rng.uniform01(shape) - 0.5
        r2 = rng.uniform01(shape) - 0.5
        dirs = [rng.uniform01(x.shape) - 0.5 for x in inputs]

        def value(xs):
            g = ad.Graph()
            return float(_scalarize(fn(*[g.input(x) for x in xs]), r1, r2).value)

        def first(xs):
            g = ad.Graph()
            vs = [g.input(x) for x in xs]
            return ad.backward(g, _scalarize(fn(*vs), r1, r2), vs)

        grads = first(inputs)
        for i in range(len(inputs)):
            fd = central_difference(value, inputs, i)
            worst1 = max(worst1, close_error(grads[i], fd))

        # Hessian-vector product by double backward
        g = ad.Graph()
        vs = [g.input(x) for x in inputs]
        gs = ad.backward(g, _scalarize(fn(*vs), r1, r2), vs, create_graph=True)
        hv_scalar = ad.sum(ad.concat([ad.reshape(ad.mul(gi, d), (-1,)) for gi, d in zip(gs, dirs)]))
        hv = ad.backward(g, hv_scalar, vs)
        plus = first([x + FD_STEP * d for x, d in zip(inputs, dirs)])
        minus = first([x - FD_STEP * d for x, d in zip(inputs, dirs)])
        for i in range(len(inputs)):
            fd2 = (plus[i] - minus[i]) / (2 * FD_STEP)
            worst2 = max(worst2, close_error(hv[i], fd2))
    return [
        CheckResult(name, 1, worst1 <= 1.0, worst1, instances),
        CheckResult(name, 2, worst2 <= 1.0, worst2, instances),
    ]


def check_primitives(seed: int = 0, instances: int = 20, cases=None) -> GradcheckReport:
    report = GradcheckReport("primitives")
    cases = cases or {**PRIMITIVE_CASES, **COMPOSITE_CASES}
    for k, (name, build) in enumerate(cases.items()):
        report.results.extend(_check_case(name, build, Rng(seed).spawn(k), instances))
    return report


# ---------------------------------------------------------------------------
# model and attack-path scopes

MODEL_CASES = {
    "mlp": dict(arch="mlp", in_shape=(1, 4, 4), classes=3, hidden=(5,)),
    "lenet5": dict(arch="lenet5", in_shape=(1, 16, 16), classes=4),
    "tiny_resnet": dict(arch="tiny_resnet", in_shape=(1, 4, 4), classes=3),
}


def _model_instance(case: dict, rng: Rng):
    from .models import build_model

    kwargs = {k: v for k, v in case.items() if k != "hidden"}
    if "hidden" in case:
        kwargs["hidden"] = case["hidden"]
    model = build_model(rng=rng, **kwargs)
    x = rng.uniform01(model.in_shape)
    y = rng.uniform01((model.classes,))
    return model, x, y


def _coords(rng: Rng, size: int, k: int) -> list[int]:
    if size <= k:
        return list(range(size))
    return sorted(int(c) for c in rng.permutation(size)[:k])


def check_models(seed: int = 0, instances: int = 20, coords_per_tensor: int = 4) -> GradcheckReport:
    from .models import forward_loss

    report = GradcheckReport("models")
    for k, (name, case) in enumerate(MODEL_CASES.items()):
        rng = Rng(seed).spawn(100 + k)
        worst1 = worst2 = 0.0
        for _ in range(instances):
            model, x, y = _model_instance(case, rng)
            tensors = [t for _, t in model.params.tensors()]

            def loss_at(ts, x=x, y=y, model=model):
                g = ad.Graph()
                return float(forward_loss(model, g.input(x), g.input(y), [g.input(t) for t in ts]).value)

            g = ad.Graph()
            params = [g.input(t) for t in tensors]
            grads = ad.backward(g, forward_loss(model, g.input(x), g.input(y), params), params)
            for i, t in enumerate(tensors):
                cs = _coords(rng, t.size, coords_per_tensor)
                fd = central_difference(loss_at, tensors, i, coords=cs)
                worst1 = max(worst1, close_error(grads[i].ravel()[cs], fd))

            # input Hessian-vector product through the whole network
            v = rng.uniform01(x.shape) - 0.5

            def grad_x(xx, model=model, y=y):
                gg = ad.Graph()
                xv = gg.input(xx)
                return ad.backward(gg, forward_loss(model, xv, gg.input(y)), [xv])[0]

            g = ad.Graph()
            xv = g.input(x)
            (gx,) = ad.backward(g, forward_loss(model, xv, g.input(y)), [xv], create_graph=True)
            (hv,) = ad.backward(g, ad.sum(ad.mul(gx, v)), [xv])
            fd2 = (grad_x(x + FD_STEP * v) - grad_x(x - FD_STEP * v)) / (2 * FD_STEP)
            worst2 = max(worst2, close_error(hv, fd2))
        report.results.append(CheckResult(name, 1, worst1 <= 1.0, worst1, instances))
        report.results.append(CheckResult(name, 2, worst2 <= 1.0, worst2, instances))
    return report


def _matching_hvp(model, target, x, y, measure, lam, v):
    """(grad_x L_G, d/dx <grad_x L_G, v>): L_G is differentiated three times in total."""
    from .attack import matching_loss
    from .models import forward_loss

    g = ad.Graph()
    xv, yv = g.input(x), g.input(y)
    params = model.bind(g)
    dummy = ad.backward(g, forward_loss(model, xv, yv, params), params, create_graph=True)
    lg = matching_loss(dummy, target, measure, lam)
    (gx,) = ad.backward(g, lg, [xv], create_graph=True)
    (hv,) = ad.backward(g, ad.sum(ad.mul(gx, v)), [xv])
    return gx.value, hv


def check_attack_path(seed: int = 0, instances: int = 20, coords: int = 10,
                      archs=("mlp", "lenet5"), second_order: bool = True) -> GradcheckReport:
    """grad of L_G w.r.t. the dummy image vs. central differences, per measure.

    First order: spot checks on ``coords`` pixels.  Second order: a
    Hessian-vector product of L_G against differences of its gradient.
    """
    from .attack import MeasureConfig, gradient_matching, layer_lambdas
    from .models import victim_gradients

    report = GradcheckReport("attack-path")
    for a, arch in enumerate(archs):
        for m, kind in enumerate(("eucl", "gauss", "ag")):
            rng = Rng(seed).spawn(200 + 10 * a + m)
            worst1 = worst2 = 0.0
            for _ in range(instances):
                model, x_true, _ = _model_instance(MODEL_CASES[arch], rng)
                label = np.zeros(model.classes)
                label[rng.integers(model.classes)] = 1.0
                target = victim_gradients(model, x_true, label)
                x = rng.uniform01(model.in_shape)
                y = rng.uniform01((model.classes,))
                if kind == "gauss":
                    # keep the kernel away from saturation: lambda2 near the current distance
                    d = gradient_matching(model, target, x, y, MeasureConfig("eucl"), with_grad=False)
                    measure = MeasureConfig("gauss", lambda2=max(d, 1e-6))
                else:
                    measure = MeasureConfig(kind)
                lam = None if kind == "eucl" else layer_lambdas(target, measure)
                _, gx, _ = gradient_matching(model, target, x, y, measure, lam)
                cs = _coords(rng, x.size, coords)

                def lg(xs, model=model, target=target, y=y, measure=measure, lam=lam):
                    return gradient_matching(model, target, xs[0], y, measure, lam, with_grad=False)

                fd = central_difference(lg, [x], 0, coords=cs)
                worst1 = max(worst1, close_error(gx.ravel()[cs], fd, rtol=ATTACK_RTOL))
                if second_order:
                    v = rng.uniform01(x.shape) - 0.5
                    _, hv = _matching_hvp(model, target, x, y, measure, lam, v)
                    plus = gradient_matching(model, target, x + FD_STEP * v, y, measure, lam)[1]
                    minus = gradient_matching(model, target, x - FD_STEP * v, y, measure, lam)[1]
                    fd2 = (plus - minus) / (2 * FD_STEP)
                    worst2 = max(worst2, close_error(hv, fd2, rtol=ATTACK_RTOL))
            name = f"{arch}/{kind}"
            report.results.append(CheckResult(name, 1, worst1 <= 1.0, worst1, instances))
            if second_order:
                report.results.append(CheckResult(name, 2, worst2 <= 1.0, worst2, instances))
    return report


SCOPES = {
    "primitives": check_primitives,
    "models": check_models,
    "attack-path": check_attack_path,
}


def gradcheck(scope: str = "primitives", seed: int = 0, instances: int = 20) -> GradcheckReport:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {tuple(SCOPES)}")
    return SCOPES[scope](seed=seed, instances=instances)
