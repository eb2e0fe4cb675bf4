"""Twice-differentiable classifiers and the victim-side gradient exchange."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Var
from .errors import FormatError, NumericError, ShapeError
from .rng import Rng

ARCHS = ("lenet5", "mlp", "tiny_resnet")
ACTIVATIONS = ("sigmoid", "tanh", "softplus")


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``index`` is the 1-based parameter-layer number (0 if none).

    dims by kind: conv ``(in_c, out_c, kh, kw, stride, padding)``,
    dense ``(in, out)``, residual ``(channels, kernel)`` (owns parameter
    layers ``index`` and ``index + 1``); others ``()``.
    """

    kind: str
    dims: tuple[int, ...] = ()
    index: int = 0
    act: str = ""

    @property
    def param_ids(self) -> tuple[int, ...]:
        if self.kind in ("conv", "dense"):
            return (self.index,)
        if self.kind == "residual":
            return (self.index, self.index + 1)
        return ()


@dataclass(frozen=True)
class ModelParams:
    entries: tuple[tuple[int, np.ndarray, np.ndarray], ...]

    @property
    def count(self) -> int:
        return int(sum(w.size + b.size for _, w, b in self.entries))

    def tensors(self) -> list[tuple[int, np.ndarray]]:
        """Flat ``[(layer, W), (layer, b), ...]`` in layer order."""
        out = []
        for lid, w, b in self.entries:
            out.append((lid, w))
            out.append((lid, b))
        return out


@dataclass(frozen=True)
class GradientSet:
    """Per-tensor gradients tagged with their layer number, mirroring
    :meth:`ModelParams.tensors`."""

    entries: tuple[tuple[int, np.ndarray], ...]

    def arrays(self) -> list[np.ndarray]:
        return [g for _, g in self.entries]

    def layer_ids(self) -> list[int]:
        return [lid for lid, _ in self.entries]

    def by_layer(self) -> dict[int, list[np.ndarray]]:
        out: dict[int, list[np.ndarray]] = {}
        for lid, g in self.entries:
            out.setdefault(lid, []).append(g)
        return out


@dataclass(frozen=True)
class Model:
    arch: str
    in_shape: tuple[int, ...]
    classes: int
    layers: tuple[LayerSpec, ...]
    params: ModelParams = field(repr=False)

    @property
    def param_count(self) -> int:
        return self.params.count

    def with_params(self, entries) -> "Model":
        return replace(self, params=ModelParams(tuple((i, _ro(w), _ro(b)) for i, w, b in entries)))

    def bind(self, graph: Graph) -> list[Var]:
        """Insert every parameter tensor as an input node, in ``tensors()`` order."""
        return [graph.input(t) for _, t in self.params.tensors()]

    def logits(self, x: Var, params: Sequence[Var]) -> Var:
        if tuple(x.shape) != tuple(self.in_shape):
            raise ShapeError(self.arch, [x.shape, self.in_shape], "input shape does not match model")
        by_id = {}
        for k, (lid, _, _) in enumerate(self.params.entries):
            by_id[lid] = (params[2 * k], params[2 * k + 1])
        h = ad.reshape(x, (1, -1)) if self.arch == "mlp" else ad.reshape(x, (1, *x.shape))
        for pos, layer in enumerate(self.layers, start=1):
            h = _apply_layer(layer, h, by_id)
            if not np.all(np.isfinite(h.value)):
                raise NumericError("non-finite activation", layer=layer.index or f"#{pos}:{layer.kind}")
        return h


def _ro(a) -> np.ndarray:
    return ad.as_tensor(a)


def _activate(h: Var, act: str) -> Var:
    if act == "sigmoid":
        return ad.sigmoid(h)
    if act == "tanh":
        return ad.tanh(h)
    if act == "softplus":
        return ad.softplus(h)
    raise ValueError(f"unknown activation {act!r}")


def _conv_bias(h: Var, w: Var, b: Var, padding: int, stride: int = 1) -> Var:
    y = ad.conv2d(h, w, stride=stride, padding=padding)
    return ad.add(y, ad.reshape(b, (1, -1, 1, 1)))


def _apply_layer(layer: LayerSpec, h: Var, by_id) -> Var:
    kind = layer.kind
    if kind == "conv":
        w, b = by_id[layer.index]
        return _conv_bias(h, w, b, padding=layer.dims[5], stride=layer.dims[4])
    if kind == "dense":
        w, b = by_id[layer.index]
        return ad.add(ad.matmul(h, ad.transpose(w)), ad.reshape(b, (1, -1)))
    if kind == "activation":
        return _activate(h, layer.act)
    if kind == "avgpool":
        return ad.avgpool2(h)
    if kind == "flatten":
        return ad.reshape(h, (1, -1))
    if kind == "residual":
        k = layer.dims[1]
        wa, ba = by_id[layer.index]
        wb, bb = by_id[layer.index + 1]
        inner = _activate(_conv_bias(h, wa, ba, padding=k // 2), layer.act)
        return _activate(ad.add(h, _conv_bias(inner, wb, bb, padding=k // 2)), layer.act)
    raise ValueError(f"unknown layer kind {kind!r}")


def _fan_in_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return (2.0 * rng.uniform01(shape) - 1.0) * bound


def _layer_stack(arch: str, in_shape, classes: int, hidden) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    nxt = iter(range(1, 10_000))

    def conv(cin, cout, k, stride=1, pad=0):
        layers.append(LayerSpec("conv", (cin, cout, k, k, stride, pad), next(nxt)))

    def dense(nin, nout):
        layers.append(LayerSpec("dense", (nin, nout), next(nxt)))

    def act(name):
        layers.append(LayerSpec("activation", (), 0, name))

    if arch == "mlp":
        width = int(np.prod(in_shape))
        for units in hidden:
            dense(width, units)
            act("sigmoid")
            width = units
        dense(width, classes)
        return layers

    if len(in_shape) != 3:
        raise ShapeError(arch, [tuple(in_shape)], "expected (channels, H, W)")
    c, h, w = in_shape
    if arch == "lenet5":
        if h < 16 or w < 16:
            raise ShapeError(arch, [tuple(in_shape)], "lenet5 needs H, W >= 16")
        conv(c, 6, 5)
        act("sigmoid")
        layers.append(LayerSpec("avgpool"))
        conv(6, 16, 5)
        act("sigmoid")
        layers.append(LayerSpec("avgpool"))
        fh, fw = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
        layers.append(LayerSpec("flatten"))
        dense(16 * fh * fw, 120)
        act("sigmoid")
        dense(120, 84)
        act("sigmoid")
        dense(84, classes)
        return layers
    if arch == "tiny_resnet":
        if h < 4 or w < 4:
            raise ShapeError(arch, [tuple(in_shape)], "tiny_resnet needs H, W >= 4")
        ch = 12
        conv(c, ch, 3, pad=1)
        act("softplus")
        for _ in range(2):
            first = next(nxt)
            next(nxt)
            layers.append(LayerSpec("residual", (ch, 3), first, "softplus"))
            layers.append(LayerSpec("avgpool"))
        layers.append(LayerSpec("flatten"))
        dense(ch * (h // 4) * (w // 4), 84)
        act("softplus")
        dense(84, classes)
        return layers
    raise ShapeError("build_model", [tuple(in_shape)], f"unknown arch {arch!r}; expected one of {ARCHS}")


def build_model(arch: str, in_shape, classes: int, rng: Rng, init: str = "fan_in_uniform",
                hidden: Sequence[int] = (64,)) -> Model:
    """Construct ``arch`` for inputs of ``in_shape`` with ``classes`` outputs.

    ``hidden`` only applies to ``mlp``.  Weights and biases are drawn
    uniformly from ``±1/sqrt(fan_in)``.
    """
    if init != "fan_in_uniform":
        raise ValueError(f"unknown weight init {init!r}")
    in_shape = tuple(int(s) for s in in_shape)
    layers = _layer_stack(arch, in_shape, classes, tuple(hidden))
    entries = []
    for layer in layers:
        if layer.kind == "conv":
            cin, cout, kh, kw = layer.dims[:4]
            fan = cin * kh * kw
            entries.append((layer.index, _fan_in_uniform(rng, (cout, cin, kh, kw), fan),
                            _fan_in_uniform(rng, (cout,), fan)))
        elif layer.kind == "dense":
            nin, nout = layer.dims
            entries.append((layer.index, _fan_in_uniform(rng, (nout, nin), nin),
                            _fan_in_uniform(rng, (nout,), nin)))
        elif layer.kind == "residual":
            ch, k = layer.dims
            fan = ch * k * k
            for lid in layer.param_ids:
                entries.append((lid, _fan_in_uniform(rng, (ch, ch, k, k), fan),
                                _fan_in_uniform(rng, (ch,), fan)))
    params = ModelParams(tuple((i, _ro(w), _ro(b)) for i, w, b in entries))
    model = Model(arch, in_shape, int(classes), tuple(layers), params)
    # validates that the layer shapes compose
    g = Graph()
    model.logits(g.input(np.zeros(in_shape)), model.bind(g))
    return model


# ---------------------------------------------------------------------------
# loss and victim gradients


def log_softmax(z: Var) -> Var:
    # The shift is a constant: log-sum-exp is shift invariant, so derivatives are exact.
    shift = float(np.max(z.value))
    zs = ad.sub(z, shift)
    return ad.sub(zs, ad.log(ad.sum(ad.exp(zs))))


def softmax(z: Var) -> Var:
    return ad.exp(log_softmax(z))


def cross_entropy(logits: Var, target_probs: Var) -> Var:
    """``-sum_c p_c log softmax(logits)_c`` for a single example."""
    z = ad.reshape(logits, (-1,))
    p = ad.reshape(target_probs, (-1,)) if isinstance(target_probs, Var) else np.ravel(target_probs)
    return ad.neg(ad.sum(ad.mul(log_softmax(z), p)))


def one_hot(label: int, classes: int) -> np.ndarray:
    y = np.zeros(classes)
    y[int(label)] = 1.0
    return y


def _graph_for(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Var):
            return x.graph
    return Graph()


def _on(graph: Graph, x) -> Var:
    return x if isinstance(x, Var) else graph.input(x)


def forward_loss(model: Model, x, y_logits, params: Sequence[Var] | None = None) -> Var:
    """Cross-entropy of ``model`` at image ``x`` against ``softmax(y_logits)``.

    ``x`` / ``y_logits`` may be arrays or Vars; the loss lives on their graph
    (or a fresh one).  Pass ``params`` from :meth:`Model.bind` to
    differentiate with respect to the weights.
    """
    graph = _graph_for(x, y_logits, *(params or ()))
    x = _on(graph, x)
    y = _on(graph, y_logits)
    if y.size != model.classes:
        raise ShapeError("forward_loss", [y.shape, (model.classes,)], "label size must equal class count")
    if params is None:
        params = model.bind(graph)
    logits = model.logits(x, params)
    return cross_entropy(logits, softmax(ad.reshape(y, (-1,))))


def _target_loss(model: Model, x: Var, target_probs: np.ndarray, params: Sequence[Var]) -> Var:
    return cross_entropy(model.logits(x, params), target_probs)


def victim_gradients(model: Model, x: np.ndarray, y: np.ndarray) -> GradientSet:
    """Parameter gradients a client would share for one private example.

    ``y`` is a one-hot (or any probability) vector used directly as the
    cross-entropy target.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != model.classes:
        raise ShapeError("victim_gradients", [y.shape, (model.classes,)], "label size must equal class count")
    g = Graph()
    params = model.bind(g)
    loss = _target_loss(model, g.input(x), y, params)
    grads = ad.backward(g, loss, params)
    for (lid, _), gr in zip(model.params.tensors(), grads):
        if not np.all(np.isfinite(gr)):
            raise NumericError("non-finite victim gradient", layer=lid)
    return GradientSet(tuple((lid, _ro(gr)) for (lid, _), gr in zip(model.params.tensors(), grads)))


def parameter_gradients(model: Model, x: Var, y_logits: Var, *, create_graph: bool = True) -> list:
    """Gradients of :func:`forward_loss` with respect to every parameter tensor."""
    params = model.bind(x.graph)
    loss = forward_loss(model, x, y_logits, params)
    return ad.backward(x.graph, loss, params, create_graph=create_graph)


# ---------------------------------------------------------------------------
# checkpoint format: little-endian, magic "GLKW"

MAGIC = b"GLKW"
VERSION = 1
_KINDS = {"conv": 1, "avgpool": 2, "dense": 3, "activation": 4, "flatten": 5, "residual": 6}
_ACTS = {"": 0, "sigmoid": 1, "tanh": 2, "softplus": 3}


def save_checkpoint(path, model: Model) -> None:
    out = bytearray(MAGIC)
    arch = model.arch.encode()
    out += struct.pack("<III", VERSION, len(model.layers), len(model.in_shape))
    out += struct.pack(f"<{len(model.in_shape)}I", *model.in_shape)
    out += struct.pack("<II", model.classes, len(arch)) + arch
    params = {lid: (w, b) for lid, w, b in model.params.entries}
    for layer in model.layers:
        out += struct.pack("<BBII", _KINDS[layer.kind], _ACTS[layer.act], layer.index, len(layer.dims))
        out += struct.pack(f"<{len(layer.dims)}i", *layer.dims)
        ids = layer.param_ids
        out += struct.pack("<I", len(ids))
        for lid in ids:
            w, b = params[lid]
            out += struct.pack("<II", lid, w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape)
            out += struct.pack("<I", b.size)
            out += np.ascontiguousarray(w, dtype="<f8").tobytes()
            out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint", f"truncated at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError("checkpoint", "bad magic (expected GLKW)")
    version, n_layers, ndim = r.unpack("<III")
    if version != VERSION:
        raise FormatError("checkpoint", f"unsupported version {version}")
    in_shape = r.unpack(f"<{ndim}I")
    classes, name_len = r.unpack("<II")
    arch = r.take(name_len).decode("utf-8", errors="replace")
    if arch not in ARCHS:
        raise FormatError("checkpoint", f"unknown arch {arch!r}")
    kinds = {v: k for k, v in _KINDS.items()}
    acts = {v: k for k, v in _ACTS.items()}
    layers, entries = [], []
    for _ in range(n_layers):
        kind, act, index, nd = r.unpack("<BBII")
        if kind not in kinds or act not in acts:
            raise FormatError("checkpoint", f"unknown layer tag {kind}/{act}")
        dims = r.unpack(f"<{nd}i")
        layers.append(LayerSpec(kinds[kind], tuple(dims), index, acts[act]))
        (n_entries,) = r.unpack("<I")
        for _ in range(n_entries):
            lid, wnd = r.unpack("<II")
            wshape = r.unpack(f"<{wnd}I")
            (blen,) = r.unpack("<I")
            wsize = int(np.prod(wshape, dtype=np.int64))
            w = np.frombuffer(r.take(8 * wsize), dtype="<f8").reshape(wshape)
            b = np.frombuffer(r.take(8 * blen), dtype="<f8")
            entries.append((lid, _ro(w), _ro(b)))
    if r.pos != len(r.data):
        raise FormatError("checkpoint", "trailing bytes after last layer")
    return Model(arch, tuple(in_shape), classes, tuple(layers), ModelParams(tuple(entries)))
