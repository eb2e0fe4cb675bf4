"""Reverse-mode automatic differentiation closed under differentiation.

A :class:`Graph` is an append-only tape of primitive applications.  Every
vector-Jacobian product is itself written with the same primitives, so the
gradients returned by ``backward(..., create_graph=True)`` live on the tape
and can be differentiated again.  The attack needs exactly this: the loss it
minimises is a function of the model's parameter gradients.

Tensors are plain read-only ``float64`` numpy arrays.

Example::

    g = Graph()
    x = g.input(3.0)
    (dx,) = backward(g, x * x * x, [x], create_graph=True)
    (d2x,) = backward(g, dx, [x])      # 6 * x = 18
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError

Array = np.ndarray

PRIMITIVES = frozenset(
    {
        "add", "sub", "mul", "div", "matmul", "conv2d", "avgpool2",
        "sigmoid", "tanh", "exp", "log", "sum", "mean", "reshape",
        "broadcast", "slice", "concat", "scale", "neg", "max_const",
        # adjoint helpers: transpose is the VJP of matmul's operand layout,
        # embed (zero-fill scatter) is the VJP of slice and vice versa
        "transpose", "embed",
    }
)
INPUT = "input"


def as_tensor(value: Any) -> Array:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    value: Array | None = None


class Graph:
    """Append-only tape; parents of node ``k`` always have index < ``k``."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def input(self, value: Any) -> "Var":
        self.nodes.append(Node(INPUT, (), {}, as_tensor(value)))
        return Var(self, len(self.nodes) - 1)

    def var(self, node_id: int) -> "Var":
        return Var(self, node_id)

    def value(self, node_id: int) -> Array:
        return self.nodes[node_id].value

    def apply(self, op: str, parents: Sequence["Var | int"], **attrs) -> "Var":
        if op not in PRIMITIVES:
            raise ValueError(f"unknown primitive {op!r}")
        ids = tuple(p.id if isinstance(p, Var) else int(p) for p in parents)
        for i in ids:
            if not 0 <= i < len(self.nodes):
                raise IndexError(f"{op}: parent id {i} not on this graph")
        vals = [self.nodes[i].value for i in ids]
        out = FORWARD[op](vals, attrs)
        out = np.asarray(out, dtype=np.float64)
        out.flags.writeable = False
        self.nodes.append(Node(op, ids, attrs, out))
        return Var(self, len(self.nodes) - 1)

    def ops(self) -> set[str]:
        return {n.op for n in self.nodes}


def primitive_apply(graph: Graph, op: str, parents: Sequence["Var | int"], **attrs) -> int:
    return graph.apply(op, parents, **attrs).id


class Var:
    """Handle to one node of a graph, with arithmetic operator overloads."""

    __slots__ = ("graph", "id")
    __array_priority__ = 1000

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> Array:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.graph.nodes[self.id].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# forward kernels


def _same_shape(op: str, vals) -> None:
    if vals[0].shape != vals[1].shape:
        raise ShapeError(op, [v.shape for v in vals], "elementwise operands must match")


def _fwd_elementwise(op, fn):
    def kernel(vals, attrs):
        _same_shape(op, vals)
        return fn(vals[0], vals[1])

    return kernel


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "expected (m,k) @ (k,n)")
    return a @ b


def _conv_geometry(xshape, wshape, stride, padding):
    if len(xshape) != 4 or len(wshape) != 4 or xshape[1] != wshape[1]:
        raise ShapeError("conv2d", [xshape, wshape], "expected (N,C,H,W) and (O,C,kh,kw)")
    hp = xshape[2] + 2 * padding[0]
    wp = xshape[3] + 2 * padding[1]
    kh, kw = wshape[2], wshape[3]
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", [xshape, wshape], "kernel larger than padded input")
    ho = (hp - kh) // stride[0] + 1
    wo = (wp - kw) // stride[1] + 1
    return hp, wp, ho, wo


def _fwd_conv2d(vals, attrs):
    x, w = vals
    stride, padding = attrs["stride"], attrs["padding"]
    _conv_geometry(x.shape, w.shape, stride, padding)
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3))[:, :, :: stride[0], :: stride[1]]
    # win: (N, C, Ho, Wo, kh, kw); cross-correlation, no kernel flip
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _fwd_avgpool2(vals, attrs):
    (x,) = vals
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError("avgpool2", [x.shape], "need at least 2x2 trailing extent")
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    lead = x.shape[:-2]
    blocks = x[..., : 2 * h, : 2 * w].reshape(*lead, h, 2, w, 2)
    return blocks.mean(axis=(-3, -1))


def _fwd_sum(vals, attrs):
    (x,) = vals
    return np.sum(x, axis=_check_axes("sum", x, attrs["axes"]))


def _fwd_mean(vals, attrs):
    (x,) = vals
    return np.mean(x, axis=_check_axes("mean", x, attrs["axes"]))


def _check_axes(op, x, axes):
    if axes is None:
        return None
    for a in axes:
        if not 0 <= a < x.ndim:
            raise ShapeError(op, [x.shape], f"axis {a} out of range")
    return axes


def _fwd_reshape(vals, attrs):
    (x,) = vals
    shape = attrs["shape"]
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError("reshape", [x.shape, shape], "element count differs")
    return x.reshape(shape)


def _fwd_broadcast(vals, attrs):
    (x,) = vals
    try:
        return np.broadcast_to(x, attrs["shape"]).copy()
    except ValueError:
        raise ShapeError("broadcast", [x.shape, attrs["shape"]]) from None


def _to_index(spec):
    # slice.indices() reports a reversed slice running past 0 as stop=-1
    return tuple(slice(a, b if b >= 0 else None, c) for a, b, c in spec)


def _fwd_slice(vals, attrs):
    (x,) = vals
    if len(attrs["index"]) > x.ndim:
        raise ShapeError("slice", [x.shape], "too many indices")
    return x[_to_index(attrs["index"])].copy()


def _fwd_embed(vals, attrs):
    (x,) = vals
    out = np.zeros(attrs["shape"])
    idx = _to_index(attrs["index"])
    if out[idx].shape != x.shape:
        raise ShapeError("embed", [x.shape, attrs["shape"]], "slot shape differs")
    out[idx] = x
    return out


def _fwd_concat(vals, attrs):
    axis = attrs["axis"]
    ref = vals[0].shape
    for v in vals:
        if v.ndim != len(ref) or any(
            v.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeError("concat", [u.shape for u in vals])
    return np.concatenate(vals, axis=axis)


def _fwd_transpose(vals, attrs):
    (x,) = vals
    axes = attrs["axes"]
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", [x.shape], f"bad permutation {axes}")
    return np.ascontiguousarray(x.transpose(axes))


def _unary(fn):
    return lambda vals, attrs: fn(vals[0])


FORWARD: dict[str, Callable] = {
    "add": _fwd_elementwise("add", np.add),
    "sub": _fwd_elementwise("sub", np.subtract),
    "mul": _fwd_elementwise("mul", np.multiply),
    "div": _fwd_elementwise("div", np.divide),
    "matmul": _fwd_matmul,
    "conv2d": _fwd_conv2d,
    "avgpool2": _fwd_avgpool2,
    "sigmoid": _unary(expit),
    "tanh": _unary(np.tanh),
    "exp": _unary(np.exp),
    "log": _unary(np.log),
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "reshape": _fwd_reshape,
    "broadcast": _fwd_broadcast,
    "slice": _fwd_slice,
    "embed": _fwd_embed,
    "concat": _fwd_concat,
    "transpose": _fwd_transpose,
    "scale": lambda vals, attrs: vals[0] * attrs["c"],
    "neg": _unary(np.negative),
    "max_const": lambda vals, attrs: np.maximum(vals[0], attrs["eps"]),
}


# ---------------------------------------------------------------------------
# functional API (inserts broadcasts, lifts constants)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Var):
            return x.graph
    raise TypeError("at least one operand must be a Var")


def _lift(graph: Graph, x) -> Var:
    if isinstance(x, Var):
        if x.graph is not graph:
            raise ValueError("operands belong to different graphs")
        return x
    return graph.input(x)


def _broadcast_pair(op, a, b):
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.shape == b.shape:
        return g, a, b
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None
    if a.shape != shape:
        a = broadcast_to(a, shape)
    if b.shape != shape:
        b = broadcast_to(b, shape)
    return g, a, b


def add(a, b) -> Var:
    g, a, b = _broadcast_pair("add", a, b)
    return g.apply("add", [a, b])


def sub(a, b) -> Var:
    g, a, b = _broadcast_pair("sub", a, b)
    return g.apply("sub", [a, b])


def mul(a, b) -> Var:
    if isinstance(b, (int, float)) and isinstance(a, Var):
        return scale(a, b)
    if isinstance(a, (int, float)) and isinstance(b, Var):
        return scale(b, a)
    g, a, b = _broadcast_pair("mul", a, b)
    return g.apply("mul", [a, b])


def div(a, b) -> Var:
    if isinstance(b, (int, float)) and isinstance(a, Var):
        return scale(a, 1.0 / b)
    g, a, b = _broadcast_pair("div", a, b)
    return g.apply("div", [a, b])


def matmul(a, b) -> Var:
    g = _graph_of(a, b)
    return g.apply("matmul", [_lift(g, a), _lift(g, b)])


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def conv2d(x: Var, w, stride=1, padding=0) -> Var:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    g = _graph_of(x, w)
    return g.apply("conv2d", [_lift(g, x), _lift(g, w)], stride=_pair(stride), padding=_pair(padding))


def avgpool2(x: Var) -> Var:
    return x.graph.apply("avgpool2", [x])


def sigmoid(x: Var) -> Var:
    return x.graph.apply("sigmoid", [x])


def tanh(x: Var) -> Var:
    return x.graph.apply("tanh", [x])


def exp(x: Var) -> Var:
    return x.graph.apply("exp", [x])


def log(x: Var) -> Var:
    return x.graph.apply("log", [x])


def _norm_axes(x: Var, axis) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % x.ndim for a in axis))


def sum(x: Var, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    return x.graph.apply("sum", [x], axes=_norm_axes(x, axis))


def mean(x: Var, axis=None) -> Var:
    return x.graph.apply("mean", [x], axes=_norm_axes(x, axis))


def reshape(x: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        shape = np.empty(x.shape).reshape(shape).shape
    return x.graph.apply("reshape", [x], shape=shape)


def broadcast_to(x: Var, shape) -> Var:
    return x.graph.apply("broadcast", [x], shape=tuple(int(s) for s in shape))


def _index_spec(shape, index) -> tuple[tuple, ...]:
    if not isinstance(index, tuple):
        index = (index,)
    spec = []
    for d, ix in enumerate(index):
        if isinstance(ix, slice):
            spec.append(ix.indices(shape[d]))
        else:
            raise TypeError("only basic slices are supported; use reshape to drop axes")
    return tuple(spec)


def slice_(x: Var, index) -> Var:
    return x.graph.apply("slice", [x], index=_index_spec(x.shape, index))


def embed(x: Var, shape, index) -> Var:
    """Place ``x`` into a zero tensor of ``shape`` at ``index`` (slice adjoint)."""
    shape = tuple(int(s) for s in shape)
    return x.graph.apply("embed", [x], shape=shape, index=_index_spec(shape, index))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    g = _graph_of(*xs)
    return g.apply("concat", [_lift(g, x) for x in xs], axis=axis % xs[0].ndim)


def transpose(x: Var, axes=None) -> Var:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    return x.graph.apply("transpose", [x], axes=axes)


def scale(x: Var, c: float) -> Var:
    return x.graph.apply("scale", [x], c=float(c))


def neg(x: Var) -> Var:
    return x.graph.apply("neg", [x])


def max_const(x: Var, eps: float) -> Var:
    """Elementwise max(x, eps); subgradient passes where ``x > eps``."""
    return x.graph.apply("max_const", [x], eps=float(eps))


def softplus(x: Var) -> Var:
    return log(add(exp(x), 1.0))


def square(x: Var) -> Var:
    return mul(x, x)


# ---------------------------------------------------------------------------
# vector-Jacobian products, written with the primitives above


def _vjp_conv2d(graph, k, g):
    node = graph.nodes[k]
    x, w = graph.var(node.parents[0]), graph.var(node.parents[1])
    (sh, sw), (ph, pw) = node.attrs["stride"], node.attrs["padding"]
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp, ho, wo = _conv_geometry(x.shape, w.shape, (sh, sw), (ph, pw))
    gd = g
    hd, wdd = (ho - 1) * sh + 1, (wo - 1) * sw + 1
    if sh > 1 or sw > 1:
        gd = embed(g, (n, o, hd, wdd), (slice(None), slice(None), slice(None, None, sh), slice(None, None, sw)))

    xp = x
    if ph or pw:
        xp = embed(x, (n, c, hp, wp), (slice(None), slice(None), slice(ph, ph + h), slice(pw, pw + wd)))
    # weight gradient: correlate padded input with the (dilated) output gradient
    gw = conv2d(transpose(xp, (1, 0, 2, 3)), transpose(gd, (1, 0, 2, 3)))
    if gw.shape[2] != kh or gw.shape[3] != kw:
        gw = slice_(gw, (slice(None), slice(None), slice(0, kh), slice(0, kw)))
    gw = transpose(gw, (1, 0, 2, 3))

    # input gradient: full correlation with the flipped, channel-swapped kernel
    wf = transpose(slice_(w, (slice(None), slice(None), slice(None, None, -1), slice(None, None, -1))), (1, 0, 2, 3))
    gx = conv2d(gd, wf, padding=(kh - 1, kw - 1))
    if gx.shape[2] != hp or gx.shape[3] != wp:
        gx = embed(gx, (n, c, hp, wp), (slice(None), slice(None), slice(0, gx.shape[2]), slice(0, gx.shape[3])))
    if ph or pw:
        gx = slice_(gx, (slice(None), slice(None), slice(ph, ph + h), slice(pw, pw + wd)))
    return gx, gw


def _vjp_avgpool2(graph, k, g):
    node = graph.nodes[k]
    x = graph.var(node.parents[0])
    lead = x.shape[:-2]
    h, w = g.shape[-2], g.shape[-1]
    up = reshape(g, (*lead, h, 1, w, 1))
    up = broadcast_to(up, (*lead, h, 2, w, 2))
    up = scale(reshape(up, (*lead, 2 * h, 2 * w)), 0.25)
    if up.shape != x.shape:
        idx = tuple(slice(None) for _ in lead) + (slice(0, 2 * h), slice(0, 2 * w))
        up = embed(up, x.shape, idx)
    return (up,)


def _keepdims_shape(shape, axes):
    if axes is None:
        return tuple(1 for _ in shape)
    return tuple(1 if d in axes else s for d, s in enumerate(shape))


def _vjp_sum(graph, k, g):
    node = graph.nodes[k]
    x = graph.var(node.parents[0])
    return (broadcast_to(reshape(g, _keepdims_shape(x.shape, node.attrs["axes"])), x.shape),)


def _vjp_mean(graph, k, g):
    node = graph.nodes[k]
    x = graph.var(node.parents[0])
    count = x.size // max(node.value.size, 1)
    (b,) = _vjp_sum(graph, k, g)
    return (scale(b, 1.0 / count),)


def _vjp_broadcast(graph, k, g):
    node = graph.nodes[k]
    x = graph.var(node.parents[0])
    out_shape = node.value.shape
    lead = len(out_shape) - x.ndim
    axes = list(range(lead))
    axes += [lead + d for d, s in enumerate(x.shape) if s == 1 and out_shape[lead + d] != 1]
    r = sum(g, tuple(axes)) if axes else g
    if r.shape != x.shape:
        r = reshape(r, x.shape)
    return (r,)


def _vjp_concat(graph, k, g):
    node = graph.nodes[k]
    axis = node.attrs["axis"]
    out, start = [], 0
    for pid in node.parents:
        size = graph.value(pid).shape[axis]
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, start + size)
        out.append(slice_(g, tuple(idx)))
        start += size
    return tuple(out)


def _vjp_max_const(graph, k, g):
    node = graph.nodes[k]
    mask = graph.value(node.parents[0]) > node.attrs["eps"]
    return (mul(g, graph.input(mask.astype(np.float64))),)


def _p(graph: Graph, k: int, i: int) -> Var:
    return graph.var(graph.nodes[k].parents[i])


def _pshape(graph: Graph, k: int, i: int = 0) -> tuple[int, ...]:
    return graph.value(graph.nodes[k].parents[i]).shape


def _y(graph: Graph, k: int) -> Var:
    return graph.var(k)


VJP: dict[str, Callable] = {
    "add": lambda G, k, g: (g, g),
    "sub": lambda G, k, g: (g, neg(g)),
    "mul": lambda G, k, g: (mul(g, _p(G, k, 1)), mul(g, _p(G, k, 0))),
    "div": lambda G, k, g: (div(g, _p(G, k, 1)), neg(div(mul(g, _y(G, k)), _p(G, k, 1)))),
    "matmul": lambda G, k, g: (
        matmul(g, transpose(_p(G, k, 1))),
        matmul(transpose(_p(G, k, 0)), g),
    ),
    "conv2d": _vjp_conv2d,
    "avgpool2": _vjp_avgpool2,
    # derivatives reuse the output node: sigmoid' = y - y*y, tanh' = 1 - y*y, exp' = y
    "sigmoid": lambda G, k, g: (mul(g, sub(_y(G, k), mul(_y(G, k), _y(G, k)))),),
    "tanh": lambda G, k, g: (sub(g, mul(g, mul(_y(G, k), _y(G, k)))),),
    "exp": lambda G, k, g: (mul(g, _y(G, k)),),
    "log": lambda G, k, g: (div(g, _p(G, k, 0)),),
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "reshape": lambda G, k, g: (reshape(g, _pshape(G, k)),),
    "broadcast": _vjp_broadcast,
    "slice": lambda G, k, g: (
        G.apply("embed", [g], shape=_pshape(G, k), index=G.nodes[k].attrs["index"]),
    ),
    "embed": lambda G, k, g: (G.apply("slice", [g], index=G.nodes[k].attrs["index"]),),
    "concat": _vjp_concat,
    "transpose": lambda G, k, g: (transpose(g, tuple(int(a) for a in np.argsort(G.nodes[k].attrs["axes"]))),),
    "scale": lambda G, k, g: (scale(g, G.nodes[k].attrs["c"]),),
    "neg": lambda G, k, g: (neg(g),),
    "max_const": _vjp_max_const,
}


def _as_id(x) -> int:
    return x.id if isinstance(x, Var) else int(x)


def backward(graph: Graph, output, wrt: Sequence, create_graph: bool = False):
    """Gradients of the scalar node ``output`` with respect to ``wrt``.

    With ``create_graph`` the results are :class:`Var` nodes on ``graph``; a
    second ``backward`` through them yields higher-order derivatives.
    Otherwise plain arrays are returned.  A ``wrt`` node that ``output`` does
    not depend on gets a zero gradient.
    """
    out_id = _as_id(output)
    wrt_ids = [_as_id(w) for w in wrt]
    if graph.nodes[out_id].value.size != 1:
        raise ShapeError("backward", [graph.nodes[out_id].value.shape], "output must be scalar")

    # nodes that lie on some path wrt -> output
    lo = min(wrt_ids, default=out_id)
    depends = np.zeros(out_id + 1, dtype=bool)
    for i in wrt_ids:
        if i <= out_id:
            depends[i] = True
    for k in range(lo, out_id + 1):
        if not depends[k]:
            depends[k] = any(depends[p] for p in graph.nodes[k].parents)

    grads: dict[int, Var] = {}
    if depends[out_id]:
        grads[out_id] = graph.input(np.ones_like(graph.nodes[out_id].value))

    for k in range(out_id, lo - 1, -1):
        if k not in grads:
            continue
        node = graph.nodes[k]
        if node.op == INPUT:
            continue
        contribs = VJP[node.op](graph, k, grads[k])
        for pid, gp in zip(node.parents, contribs):
            if gp is None or not depends[pid]:
                continue
            grads[pid] = add(grads[pid], gp) if pid in grads else gp

    result = []
    for i in wrt_ids:
        if i in grads:
            gv = grads[i]
        else:
            gv = graph.input(np.zeros_like(graph.nodes[i].value))
        result.append(gv if create_graph else gv.value)
    return result


def grad_of(fn: Callable[..., Var], *values: Array) -> list[Array]:
    """Convenience: gradient of scalar ``fn(*vars)`` at ``values`` on a fresh graph."""
    g = Graph()
    xs = [g.input(v) for v in values]
    return backward(g, fn(*xs), xs)
