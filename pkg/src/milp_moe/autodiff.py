"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Tensors are rank 0-2. Every op checks its output for NaN/Inf and records a
closure mapping the output gradient to parent gradients; :func:`backward`
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """A forward value became NaN or infinite."""


class ShapeError(ValueError):
    pass


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim > 2:
            raise ShapeError(f"rank {self.value.ndim} tensors are not supported")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    # a NaN/Inf anywhere makes the sum non-finite; so does overflow, which is equally fatal
    if not math.isfinite(value.sum()):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.value * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.value + float(s), (a,), lambda g: (g,), "add_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with ``b`` of shape (1, out)."""
    if x.value.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ShapeError(f"linear: shape mismatch {x.shape} @ {W.shape} + {b.shape}")

    def bw(g):
        return g @ W.value.T, x.value.T @ g, g.sum(axis=0, keepdims=True)

    return _make(x.value @ W.value + b.value, (x, W, b), bw, "linear")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    v = a.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.value)
    return _make(v, (a,), lambda g: (g / a.value,), "log")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        v = np.exp(a.value)
    return _make(v, (a,), lambda g: (g * v,), "exp")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        v = np.sqrt(a.value)
    return _make(v, (a,), lambda g: (g * 0.5 / np.where(v > 0, v, np.inf),), "sqrt")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "divide")
    with np.errstate(divide="ignore", invalid="ignore"):
        v = a.value / b.value
    return _make(v, (a, b), lambda g: (
        _unbroadcast(g / b.value, a.shape),
        _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
    ), "divide")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows: (r, k) -> (1, k)."""
    r = a.shape[0]
    if r == 0:
        raise ShapeError("mean_rows of an empty tensor")
    return _make(a.value.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / r, a.shape).copy(),), "mean_rows")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean (Frobenius) norm as a scalar."""
    v = float(np.sqrt(np.sum(a.value * a.value)))

    def bw(g):
        return (g * a.value / v if v > 0 else np.zeros_like(a.value),)

    return _make(np.array(v), (a,), bw, "l2_norm")


def softmax_with_temperature(a: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``a / tau`` with max subtraction."""
    if not tau > 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    v = a.value if a.value.ndim == 2 else a.value.reshape(1, -1)
    z = v / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    y = y.reshape(a.shape)

    def bw(g):
        g2 = g.reshape(v.shape)
        y2 = y.reshape(v.shape)
        dz = (g2 - (g2 * y2).sum(axis=1, keepdims=True)) * y2 / tau
        return (dz.reshape(a.shape),)

    return _make(y, (a,), bw, "softmax")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.value.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: shape mismatch " + " vs ".join(str(p.shape) for p in parts))
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), parts, bw, "concat_cols")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.value.ndim != 2 for p in parts):
        raise ShapeError("concat_rows: shape mismatch " + " vs ".join(str(p.shape) for p in parts))
    heights = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[heights[i]:heights[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), parts, bw, "concat_rows")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), bw, "gather_rows")


def segment_sum(a: Tensor, segment: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row ``segment`` ids."""
    segment = np.asarray(segment, dtype=np.int64)
    if segment.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: shape mismatch {a.shape} vs ids {segment.shape}")
    out = np.zeros((num_segments, a.shape[1]))
    np.add.at(out, segment, a.value)
    return _make(out, (a,), lambda g: (g[segment],), "segment_sum")


def column(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor as shape (rows, 1)."""
    def bw(g):
        out = np.zeros_like(a.value)
        out[:, j] = g[:, 0]
        return (out,)

    return _make(a.value[:, j:j + 1], (a,), bw, "column")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    Raises if a reached leaf already holds a gradient (call ``zero_grad`` first).
    Parameters in ``params`` that the loss does not reach get zero gradients.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss) if loss.requires_grad else []
    leaves = [t for t in order if not t.parents]
    for t in leaves:
        if t.grad is not None:
            raise AutodiffError(f"gradient of {t.name or t!r} already populated; call zero_grad() first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g.reshape(node.shape).copy()
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.value)


# ---------------------------------------------------------------------------
# parameters, optimizers, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> trainable tensor map."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} vs parameter {t.shape}")
            t.value = v.copy()

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self._params.values())


def sgd_step(params: ParamStore, lr: float) -> None:
    for t in params.values():
        if t.grad is not None:
            t.value -= lr * t.grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(t.value) for k, t in params.items()},
                   {k: np.zeros_like(t.value) for k, t in params.items()})


def adam_step(params: ParamStore, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.value)
            state.v[name] = np.zeros_like(t.value)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


CHECKPOINT_MAGIC = b"MMOECKPT"
CHECKPOINT_VERSION = 1


def save_arrays(path, arrays: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]", header: dict) -> Path:
    """Write a checkpoint container.

    Layout (little endian): magic ``MMOECKPT``; u32 version; u32 header length
    and UTF-8 JSON header; u32 entry count; per entry: u16 name length, name,
    u8 rank, u32 per dimension, raw float64 payload.
    """
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hdr)), hdr,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def load_arrays(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nl].decode("utf-8")
        pos += nl
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return arrays, header


def save_params(params: ParamStore, path, header: dict) -> Path:
    return save_arrays(path, OrderedDict((k, t.value) for k, t in params.items()), header)


def numerical_gradient(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``t``."""
    out = np.zeros_like(t.value)
    flat = t.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out
