"""Small reverse-mode autodiff over numpy arrays.

A :class:`Graph` is a tape: every primitive application appends a node in
execution order, so the tape is already topologically sorted. Parameters are
bound into a graph by name; :meth:`Graph.backward` walks the tape in reverse
and returns gradients for every ``requires_grad`` leaf and every
embedding-lookup site.

Graphs are cheap and meant to be built per forward pass. Model parameters
live in plain ``dict[str, np.ndarray]`` stores which graphs only read, so
several threads can run forward/backward on frozen parameters at once.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float32
NEG_INF = -1e9


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""


class Tensor:
    __slots__ = ("id", "data", "requires_grad", "name", "graph")

    def __init__(self, graph: "Graph", tid: int, data: np.ndarray,
                 requires_grad: bool = False, name: str | None = None):
        self.graph = graph
        self.id = tid
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor#{self.id}{label} shape={self.shape}>"

    # operator sugar; scalars and arrays become constants
    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    def __getitem__(self, index):
        return self.graph.apply("slice", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.apply("reshape", self, shape=shape)

    def transpose(self, *axes):
        return self.graph.apply("transpose", self, axes=axes or None)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    attrs: dict[str, Any]
    cache: Any = None


# --------------------------------------------------------------------------
# primitive table: name -> (forward, backward)
#   forward(arrays, **attrs) -> (out, cache)
#   backward(g, arrays, out, cache, **attrs) -> list of grads (None = no grad)
# --------------------------------------------------------------------------

_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def primitive(name):
    def register(cls):
        _PRIMITIVES[name] = (cls.forward, cls.backward)
        return cls
    return register


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@primitive("add")
class _Add:
    @staticmethod
    def forward(arrays):
        a, b = arrays
        _broadcast_check("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, arrays, out, cache):
        a, b = arrays
        return [unbroadcast(g, a.shape), unbroadcast(g, b.shape)]


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(arrays):
        a, b = arrays
        _broadcast_check("sub", a, b)
        return a - b, None

    @staticmethod
    def backward(g, arrays, out, cache):
        a, b = arrays
        return [unbroadcast(g, a.shape), unbroadcast(-g, b.shape)]


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(arrays):
        a, b = arrays
        _broadcast_check("mul", a, b)
        return a * b, None

    @staticmethod
    def backward(g, arrays, out, cache):
        a, b = arrays
        return [unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)]


@primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(arrays):
        a, b = arrays
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
        return a @ b, None

    @staticmethod
    def backward(g, arrays, out, cache):
        a, b = arrays
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return [unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)]


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(arrays, axis=-1):
        ref = arrays[0]
        ax = axis % ref.ndim
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                    s != r for i, (s, r) in enumerate(zip(arr.shape, ref.shape)) if i != ax):
                raise ShapeError("concat: shapes "
                                 f"{[x.shape for x in arrays]} differ off axis {axis}")
        return np.concatenate(arrays, axis=axis), [x.shape[ax] for x in arrays]

    @staticmethod
    def backward(g, arrays, out, sizes, axis=-1):
        splits = np.cumsum(sizes)[:-1]
        return np.split(g, splits, axis=axis)


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(arrays):
        return np.tanh(arrays[0]), None

    @staticmethod
    def backward(g, arrays, out, cache):
        return [g * (1.0 - out * out)]


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(arrays):
        return _sigmoid(arrays[0]), None

    @staticmethod
    def backward(g, arrays, out, cache):
        return [g * out * (1.0 - out)]


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(arrays):
        return np.maximum(arrays[0], 0), None

    @staticmethod
    def backward(g, arrays, out, cache):
        return [g * (arrays[0] > 0)]


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(arrays, axis=-1):
        return softmax_array(arrays[0], axis), None

    @staticmethod
    def backward(g, arrays, out, cache, axis=-1):
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


@primitive("log")
class _Log:
    @staticmethod
    def forward(arrays):
        return np.log(arrays[0]), None

    @staticmethod
    def backward(g, arrays, out, cache):
        return [g / arrays[0]]


@primitive("log_softmax")
class _LogSoftmax:
    # produced by Graph.apply when log() is applied to a softmax output
    @staticmethod
    def forward(arrays, axis=-1):
        return log_softmax_array(arrays[0], axis), None

    @staticmethod
    def backward(g, arrays, out, cache, axis=-1):
        return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(arrays, axis=None, keepdims=False):
        x = arrays[0]
        return np.asarray(x.mean(axis=axis, keepdims=keepdims), dtype=x.dtype), None

    @staticmethod
    def backward(g, arrays, out, cache, axis=None, keepdims=False):
        x = arrays[0]
        count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, x.shape).astype(x.dtype)]


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(arrays, axis=None, keepdims=False):
        x = arrays[0]
        return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), None

    @staticmethod
    def backward(g, arrays, out, cache, axis=None, keepdims=False):
        x = arrays[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.shape).astype(x.dtype)]


@primitive("embedding")
class _Embedding:
    @staticmethod
    def forward(arrays, ids=None):
        table = arrays[0]
        ids = np.asarray(ids)
        if table.ndim != 2:
            raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"embedding-lookup: ids out of range for table {table.shape}")
        return table[ids], None

    @staticmethod
    def backward(g, arrays, out, cache, ids=None):
        grad = np.zeros_like(arrays[0])
        np.add.at(grad, np.asarray(ids).reshape(-1), g.reshape(-1, g.shape[-1]))
        return [grad]


@primitive("lstm_cell")
class _LSTMCell:
    """Inputs x, h, c, W (in x 4H), U (H x 4H), b (4H); output [h', c'] on the last axis.

    Gate order is input, forget, cell, output.
    """

    @staticmethod
    def forward(arrays):
        x, h, c, W, U, b = arrays
        H = h.shape[-1]
        if W.shape != (x.shape[-1], 4 * H) or U.shape != (H, 4 * H) or b.shape[-1] != 4 * H \
                or c.shape != h.shape:
            raise ShapeError(f"lstm-cell: x {x.shape}, h {h.shape}, c {c.shape}, "
                             f"W {W.shape}, U {U.shape}, b {b.shape}")
        z = x @ W + h @ U + b
        i = _sigmoid(z[..., :H])
        f = _sigmoid(z[..., H:2 * H])
        gg = np.tanh(z[..., 2 * H:3 * H])
        o = _sigmoid(z[..., 3 * H:])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        h_new = o * tc
        return np.concatenate([h_new, c_new], axis=-1), (i, f, gg, o, tc)

    @staticmethod
    def backward(g, arrays, out, cache):
        x, h, c, W, U, b = arrays
        i, f, gg, o, tc = cache
        H = h.shape[-1]
        gh, gc = g[..., :H], g[..., H:]
        gc_total = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc_total * gg * i * (1.0 - i),
            gc_total * c * f * (1.0 - f),
            gc_total * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        gx = dz @ W.T
        gh_prev = dz @ U.T
        gc_prev = gc_total * f
        dz2 = dz.reshape(-1, 4 * H)
        gW = x.reshape(-1, x.shape[-1]).T @ dz2
        gU = h.reshape(-1, H).T @ dz2
        return [unbroadcast(gx, x.shape), unbroadcast(gh_prev, h.shape),
                unbroadcast(gc_prev, c.shape), gW, gU, unbroadcast(dz, b.shape)]


@primitive("masked_fill")
class _MaskedFill:
    @staticmethod
    def forward(arrays, mask=None, value=0.0):
        x = arrays[0]
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError(f"masked-fill: mask {mask.shape} vs input {x.shape}") from None
        return np.where(mask, np.asarray(value, dtype=x.dtype), x), mask

    @staticmethod
    def backward(g, arrays, out, cache, mask=None, value=0.0):
        return [np.where(cache, 0, g).astype(g.dtype)]


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(arrays, shape=None):
        try:
            return arrays[0].reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot view {arrays[0].shape} as {shape}") from None

    @staticmethod
    def backward(g, arrays, out, cache, shape=None):
        return [g.reshape(arrays[0].shape)]


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(arrays, axes=None):
        return np.transpose(arrays[0], axes), None

    @staticmethod
    def backward(g, arrays, out, cache, axes=None):
        inv = None if axes is None else np.argsort(axes)
        return [np.transpose(g, inv)]


@primitive("slice")
class _Slice:
    @staticmethod
    def forward(arrays, index=None):
        return arrays[0][index], None

    @staticmethod
    def backward(g, arrays, out, cache, index=None):
        grad = np.zeros_like(arrays[0])
        np.add.at(grad, index, g)
        return [grad]


@primitive("pick")
class _Pick:
    """Select ``x[..., idx[...]]`` along the last axis (one entry per row)."""

    @staticmethod
    def forward(arrays, idx=None):
        x = arrays[0]
        idx = np.asarray(idx)
        if idx.shape != x.shape[:-1]:
            raise ShapeError(f"pick: index shape {idx.shape} vs input {x.shape}")
        return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0], idx

    @staticmethod
    def backward(g, arrays, out, cache, idx=None):
        grad = np.zeros_like(arrays[0])
        np.put_along_axis(grad, cache[..., None], g[..., None], axis=-1)
        return [grad]


@primitive("layernorm")
class _LayerNorm:
    @staticmethod
    def forward(arrays, eps=1e-5):
        x, gamma, beta = arrays
        if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
            raise ShapeError(f"layernorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv)

    @staticmethod
    def backward(g, arrays, out, cache, eps=1e-5):
        x, gamma, beta = arrays
        xhat, inv = cache
        gx_hat = g * gamma
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(0)
        gb = g.reshape(-1, n).sum(0)
        return [gx, gg, gb]


PRIMITIVE_KINDS = frozenset(_PRIMITIVES)


class Graph:
    """Execution tape plus the registry of parameters bound into it."""

    def __init__(self, dtype=DTYPE):
        self.dtype = dtype
        self.nodes: list[Node] = []
        self.tensors: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}
        self.lookup_sites: list[Tensor] = []
        self._producer: dict[int, Node] = {}
        self.grads: dict[int, np.ndarray] | None = None

    def _new(self, data, requires_grad=False, name=None) -> Tensor:
        t = Tensor(self, len(self.tensors), data, requires_grad, name)
        self.tensors.append(t)
        return t

    def constant(self, value, requires_grad=False, name=None) -> Tensor:
        arr = np.asarray(value, dtype=self.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return self._new(arr, requires_grad, name)

    def param(self, name: str, value: np.ndarray, requires_grad=True) -> Tensor:
        """Bind a named parameter. Binding the same name again returns the same tensor."""
        if name in self.parameters:
            if self.parameters[name].data is not value:
                raise ValueError(f"parameter name {name!r} already bound to another array")
            return self.parameters[name]
        t = self._new(value, requires_grad, name)
        self.parameters[name] = t
        return t

    def apply(self, op: str, *inputs: Tensor, **attrs) -> Tensor:
        if op not in _PRIMITIVES:
            raise KeyError(f"unknown primitive {op!r}")
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{t!r} belongs to another graph")
        if op == "log":
            parent = self._producer.get(inputs[0].id)
            if parent is not None and parent.op == "softmax":
                # log-sum-exp path: differentiate log(softmax(z)) w.r.t. z directly
                return self.apply("log_softmax", parent.inputs[0], **parent.attrs)
        fwd = _PRIMITIVES[op][0]
        out_data, cache = fwd([t.data for t in inputs], **attrs)
        out = self._new(out_data)
        node = Node(op, inputs, out, attrs, cache)
        self.nodes.append(node)
        self._producer[out.id] = node
        if op == "embedding":
            self.lookup_sites.append(out)
        return out

    # convenience wrappers
    def embedding(self, table: Tensor, ids) -> Tensor:
        return self.apply("embedding", table, ids=np.asarray(ids))

    def softmax(self, x, axis=-1):
        return self.apply("softmax", x, axis=axis)

    def log(self, x):
        return self.apply("log", x)

    def log_softmax(self, x, axis=-1):
        return self.apply("log_softmax", x, axis=axis)

    def concat(self, xs, axis=-1):
        return self.apply("concat", *xs, axis=axis)

    def tanh(self, x):
        return self.apply("tanh", x)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def relu(self, x):
        return self.apply("relu", x)

    def mean(self, x, axis=None, keepdims=False):
        return self.apply("mean", x, axis=axis, keepdims=keepdims)

    def sum(self, x, axis=None, keepdims=False):
        return self.apply("sum", x, axis=axis, keepdims=keepdims)

    def masked_fill(self, x, mask, value=0.0):
        return self.apply("masked_fill", x, mask=np.asarray(mask, dtype=bool), value=value)

    def pick(self, x, idx):
        return self.apply("pick", x, idx=np.asarray(idx))

    def layernorm(self, x, gamma, beta, eps=1e-5):
        return self.apply("layernorm", x, gamma, beta, eps=eps)

    def lstm_cell(self, x, h, c, W, U, b):
        out = self.apply("lstm_cell", x, h, c, W, U, b)
        H = h.shape[-1]
        return out[..., :H], out[..., H:]

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse pass from a scalar ``loss``.

        Returns gradients keyed by tensor id for every ``requires_grad`` tensor
        and every embedding-lookup output; tensors the loss does not reach get
        zeros. All intermediate gradients stay available via :meth:`grad`.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.out.id)
            if g is None:
                continue
            bwd = _PRIMITIVES[node.op][1]
            in_grads = bwd(g, [t.data for t in node.inputs], node.out.data, node.cache,
                           **node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if t.id not in self._producer and not t.requires_grad:
                    continue  # constant leaf
                gi = np.asarray(gi, dtype=t.data.dtype)
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        self.grads = grads
        wanted = [t for t in self.tensors if t.requires_grad] + self.lookup_sites
        return {t.id: grads.get(t.id, np.zeros_like(t.data)) for t in wanted}

    def grad(self, t: Tensor) -> np.ndarray:
        if self.grads is None:
            raise RuntimeError("backward has not been run on this graph")
        return self.grads.get(t.id, np.zeros_like(t.data))

    def param_grads(self) -> dict[str, np.ndarray]:
        return {name: self.grad(t) for name, t in self.parameters.items() if t.requires_grad}


def apply_primitive(graph: Graph, op: str, *inputs: Tensor, **attrs) -> Tensor:
    return graph.apply(op, *inputs, **attrs)


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    return graph.backward(loss)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        """One Adam update, in place on ``params``. Returns ``params``."""
        unknown = set(grads) - set(params)
        if unknown:
            raise KeyError(f"gradients for unregistered parameters: {sorted(unknown)}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                logger.warning("non-finite gradient for %s at step %d; skipped", name, t)
                continue
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return params


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

MAGIC = b"NMTFTNSR"
FORMAT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 tensors plus a JSON header to ``path``.

    Layout (little-endian): magic, u32 version, u32 header length, header JSON,
    u32 entry count, then per entry: u32 name length, UTF-8 name, u32 ndim,
    u32 dims, float32 data.
    """
    header = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    meta = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        params[name] = arr.astype(DTYPE)
        off += 4 * n
    return params, meta


# --------------------------------------------------------------------------
# finite-difference check
# --------------------------------------------------------------------------

def gradcheck(build: Callable[[Graph, list[Tensor]], Tensor], inputs: list[np.ndarray],
              h: float = 1e-3, dtype=np.float64) -> float:
    """Largest relative error between backward and central differences.

    ``build(graph, leaves)`` must return a scalar tensor. The relative error of
    each input is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)``,
    measured in the max norm.
    """
    def evaluate(arrays):
        g = Graph(dtype=dtype)
        leaves = [g.constant(a, requires_grad=True) for a in arrays]
        return g, leaves, build(g, leaves)

    arrays = [np.array(a, dtype=dtype) for a in inputs]
    g, leaves, out = evaluate(arrays)
    g.backward(out)
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = g.grad(leaves[k])
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(evaluate(arrays)[2].data.sum())
            arr[idx] = orig - h
            fm = float(evaluate(arrays)[2].data.sum())
            arr[idx] = orig
            numeric[idx] = (fp - fm) / (2 * h)
        scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), 1e-3)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0) / scale))
    return worst
