"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`; outside a
tape they compute values only, which is what inference uses.  Every primitive
keeps whatever it needs for its backward rule in a closure.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(x * x)
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "GradientError", "set_debug",
    "add", "sub", "mul", "neg", "matmul", "linear", "tanh", "sigmoid", "exp",
    "log", "softmax", "log_softmax", "concat", "stack", "reshape", "take",
    "embedding", "weighted_sum", "where", "tsum", "mean", "dropout", "pick",
]

_local = threading.local()
_debug = False


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GradientError(RuntimeError):
    """Misuse of the backward pass."""


def set_debug(enabled: bool) -> bool:
    """Toggle finiteness assertions on every primitive output; returns the old value."""
    global _debug
    old, _debug = _debug, bool(enabled)
    return old


def _tapes() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        # extended precision passes through untouched (used by the gradient checker)
        self.data = data if data.dtype == np.longdouble else data.astype(np.float64, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise GradientError("backward() called on a tensor with no computation record")
        self._tape.backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so every input precedes its
    consumers and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes.clear()
        self.leaves.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self.leaves[id(t)] = t
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise GradientError("loss was not produced under this computation record")
        if loss.data.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise GradientError("backward() already ran on this record; reset() it first")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, leaf in self.leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != leaf.shape:
                g = np.broadcast_to(g, leaf.shape)
            leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    stack = getattr(_local, "stack", None)
    if stack:
        for t in inputs:
            if t.requires_grad:
                stack[-1].record(out, inputs, backward)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back, "mul")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def back(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "where")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# ------------------------------------------------------------------ linear ops

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: expected (..., n, k) @ (..., k, m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x = _wrap(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input last dim must equal weight in-dim; "
            f"input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape}, expected ({weight.shape[0]},)")
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)
    n_in, n_out = weight.shape[1], weight.shape[0]

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, n_out)
        gw = g2.T @ x.data.reshape(-1, n_in) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, back, "linear")


def weighted_sum(weights, values) -> Tensor:
    """Batched convex-style combination: (B, K) weights over (B, K, D) values -> (B, D)."""
    weights, values = _wrap(weights), _wrap(values)
    if (weights.ndim != 2 or values.ndim != 3
            or weights.shape != values.shape[:2]):
        raise ShapeError(
            f"weighted_sum: expected weights (B, K) and values (B, K, D), "
            f"got {weights.shape} and {values.shape}")
    w, v = weights.data, values.data
    out = (w[:, None, :] @ v)[:, 0, :]

    def back(g):
        gw = (v @ g[:, :, None])[:, :, 0] if weights.requires_grad else None
        gv = w[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return _make(out, (weights, values), back, "weighted_sum")


# -------------------------------------------------------------- normalization

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), back, "log_softmax")


# ------------------------------------------------------------------ structure

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, back, "concat")


def stack(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack: no tensors given")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: all shapes must match, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, back, "stack")


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def take(a, index) -> Tensor:
    """Indexing with the numpy index grammar; repeated fancy indices accumulate."""
    a = _wrap(a)
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    basic = _is_basic(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out if basic else np.array(out), (a,), back, "take")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), back, "embedding")


def pick(a, ids) -> Tensor:
    """Gather one entry per row along the last axis: (B, V), ids (B,) -> (B,)."""
    a = _wrap(a)
    ids = np.asarray(ids)
    if a.ndim != 2 or ids.shape != (a.shape[0],):
        raise ShapeError(f"pick: expected (B, V) and ids (B,), got {a.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[1]):
        raise IndexError(f"pick: ids must lie in [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, ids] = g
        return (full,)

    return _make(a.data[rows, ids], (a,), back, "pick")


# ----------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)
