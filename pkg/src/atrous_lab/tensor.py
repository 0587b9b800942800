"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape(): ...``)
and at least one operand participates in differentiation.  Outside a tape
everything runs as plain numpy, which is what inference uses.
"""

from __future__ import annotations

import enum
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, PrecisionError, ShapeError, TapeStateError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class Precision(enum.Enum):
    F32 = 0
    F64 = 1

    @property
    def dtype(self) -> np.dtype:
        return _FLOATS[self.value]

    @classmethod
    def of(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == _FLOATS[0]:
            return cls.F32
        if dtype == _FLOATS[1]:
            return cls.F64
        raise PrecisionError(f"unsupported dtype {dtype}")


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of differentiable operations for one step.

    A tape is consumed by :func:`backward` and cannot be replayed.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise TapeStateError("a tape is already active on this thread")
        if self.consumed:
            raise TapeStateError("tape has already been consumed")
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = None

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        out._tape = self
        self._entries.append((out, parents, vjp))


class no_grad:
    """Suspend recording on the active tape, if any."""

    def __enter__(self):
        self._saved = active_tape()
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._saved


class Tensor:
    """n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# recording helpers

def _participates(t: Tensor, tape: Tape) -> bool:
    if t._tape is None:
        return t.requires_grad
    return t._tape is tape


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _same_precision(*ts: Tensor) -> None:
    first = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != first:
            raise PrecisionError(f"mixed precision in one computation: {first} vs {t.dtype}")


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    _same_precision(a, b)
    return a, b


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(_participates(p, tape) for p in parents):
        tape.record(out, tuple(parents), vjp)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every participating leaf that requires grad.

    Gradients accumulate into existing ``.grad`` arrays.  The tape that
    produced ``loss`` is consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    if tape.consumed:
        raise TapeStateError("tape already consumed by a previous backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, vjp in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgs = vjp(g)
        for p, pg in zip(parents, pgs):
            if pg is None or not _participates(p, tape):
                continue
            key = id(p)
            if p._tape is None:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.consumed = True
    tape._entries.clear()


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out.astype(a.dtype), (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient passes only strictly inside."""
    x = a.data
    inside = (x > lo) & (x < hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape algebra

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, src),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _same_precision(*tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes "
                f"{[tuple(x.shape) for x in tensors]}"
            )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _same_precision(*parents)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with per-token statistics."""
    _same_precision(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def vjp(g):
        dxhat = g * gd
        gx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out.astype(x.dtype), (x, gamma, beta), vjp)


def zeros(shape, precision: Precision = Precision.F32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=precision.dtype), requires_grad=requires_grad)


def ones(shape, precision: Precision = Precision.F32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=precision.dtype), requires_grad=requires_grad)
