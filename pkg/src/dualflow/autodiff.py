"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is opened around a forward pass.  Leaves are registered with
:meth:`Tape.watch`; every primitive whose inputs touch the active tape appends
a record holding its backward closure.  :meth:`Tape.backward` walks the
records once, in reverse, and returns a gradient per watched leaf.

Storage is float32.  Gradients are accumulated in float64.  The
:func:`precision` context switches storage to float64, which the finite
difference checks rely on.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a tensor or gradient."""


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Immutable array value, optionally linked to a tape node."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None, check=True):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        if check:
            _check_finite(arr, "tensor")
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def _raise_item():
    raise ValueError("item() needs a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward", "kind")

    def __init__(self, out, inputs, backward, kind):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.kind = kind


class Tape:
    """Ordered record of primitive ops for one forward/backward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}
        self.param_nodes: dict[tuple[int, str], int] = {}
        self._count = 0
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _new_node(self) -> int:
        self._count += 1
        return self._count - 1

    def watch(self, x) -> Tensor:
        """Register ``x`` as a differentiable leaf and return the linked tensor."""
        x = as_tensor(x)
        node = self._new_node()
        t = Tensor(x.data, node, self, check=False)
        self.leaves[node] = t
        return t

    def record(self, out: np.ndarray, parents: Sequence[Tensor], backward, kind: str) -> Tensor:
        node = self._new_node()
        inputs = tuple(p.node if p.tape is self else None for p in parents)
        self.records.append(_Record(node, inputs, backward, kind))
        return Tensor(out, node, self, check=False)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of the scalar ``loss`` for every watched leaf.

        Leaves that the loss does not depend on get zeros.  The tape can only
        be differentiated once.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._used:
            raise RuntimeError("tape already consumed by backward()")
        if not self.records and loss.node not in self.leaves:
            raise ValueError("tape is empty")
        if loss.tape is not self:
            raise ValueError("loss was not computed on this tape")
        self._used = True
        dtype = default_dtype()
        slots: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=np.float64)}
        for rec in reversed(self.records):
            g = slots.pop(rec.out, None)
            if g is None:
                continue
            need = tuple(n is not None for n in rec.inputs)
            grads = rec.backward(g.astype(dtype, copy=False), need)
            for n, gi in zip(rec.inputs, grads):
                if n is None or gi is None:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                _check_finite(gi, f"gradient of {rec.kind}")
                if n in slots:
                    slots[n] = slots[n] + gi
                else:
                    slots[n] = gi
        out = {}
        for node, leaf in self.leaves.items():
            g = slots.get(node)
            if g is None:
                g = np.zeros(leaf.shape)
            out[node] = Tensor(g.reshape(leaf.shape))
        self.records.clear()
        return out


def _wrap(out: np.ndarray, parents: Sequence[Tensor], backward, kind: str) -> Tensor:
    _check_finite(out, kind)
    tape = active_tape()
    if tape is not None and any(p.tape is tape for p in parents):
        return tape.record(out, parents, backward, kind)
    return Tensor(out, check=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(g, sb) if need[1] else None)

    return _wrap(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(-g, sb) if need[1] else None)

    return _wrap(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g, need):
        return (
            _unbroadcast(g * bd, ad.shape) if need[0] else None,
            _unbroadcast(g * ad, bd.shape) if need[1] else None,
        )

    return _wrap(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by zero in tensor op")
    out = ad / bd

    def bw(g, need):
        return (
            _unbroadcast(g / bd, ad.shape) if need[0] else None,
            _unbroadcast(-g * out / bd, bd.shape) if need[1] else None,
        )

    return _wrap(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _wrap(-a.data, (a,), lambda g, need: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad**p

    def bw(g, need):
        return (g * p * ad ** (p - 1),)

    return _wrap(out, (a,), bw, "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _wrap(ad * ad, (a,), lambda g, need: (2 * g * ad,), "square")


# unary nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _wrap(out, (a,), lambda g, need: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    ad = a.data
    return _wrap(np.log(ad), (a,), lambda g, need: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _wrap(out, (a,), lambda g, need: (0.5 * g / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _wrap(np.sin(ad), (a,), lambda g, need: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _wrap(np.cos(ad), (a,), lambda g, need: (-g * np.sin(ad),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _wrap(out, (a,), lambda g, need: (g * (1 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _wrap(out, (a,), lambda g, need: (g * out * (1 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _wrap(ad * s, (a,), lambda g, need: (g * (s * (1 + ad * (1 - s))),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _wrap(a.data * mask, (a,), lambda g, need: (g * mask,), "relu")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"tanh": tanh, "silu": silu, "relu": relu}
SMOOTH_ACTIVATIONS = frozenset({"tanh", "silu"})


# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _wrap(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g, need: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _wrap(a.data.transpose(axes), (a,), lambda g, need: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _wrap(np.swapaxes(a.data, -1, -2), (a,), lambda g, need: (np.swapaxes(g, -1, -2),), "swap")


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g, need):
        return tuple(np.split(g, cuts, axis=axis))

    return _wrap(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def take_rows(table, index) -> Tensor:
    """Gather rows of a 2-D table; the gradient scatters back with accumulation."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def bw(g, need):
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, idx, g)
        return (gt,)

    return _wrap(table.data[idx], (table,), bw, "take_rows")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g, need):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need[0] else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need[1] else None
        return ga, gb

    return _wrap(ad @ bd, (a, b), bw, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, need):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _wrap(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g, need):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _wrap(out, (a,), bw, "log_softmax")


def softmax_cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Cross entropy ``-log softmax(logits)[target]`` along the last axis.

    ``logits`` of shape ``[K]`` with an integer target gives a scalar; shape
    ``[B, K]`` with ``B`` targets reduces by ``reduction`` (mean, sum, none).
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("cross entropy needs at least two classes")
    tgt = np.asarray(target, dtype=np.int64)
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise IndexError(f"target out of range for {k} classes")
    single = logits.ndim == 1
    z = logits.data.reshape(-1, k).astype(np.float64)
    tgt = tgt.reshape(-1)
    if tgt.shape[0] != z.shape[0]:
        raise ValueError("one target per row of logits is required")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    per = lse - z[rows, tgt]
    p = np.exp(z - lse[:, None])
    onehot = np.zeros_like(p)
    onehot[rows, tgt] = 1.0
    dz = p - onehot
    if single or reduction == "sum":
        out, scale = per.sum(), 1.0
    elif reduction == "mean":
        out, scale = per.mean(), 1.0 / z.shape[0]
    elif reduction == "none":
        out, scale = per, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    shape = logits.shape

    def bw(g, need):
        if scale is None:
            return ((dz * g.reshape(-1, 1)).reshape(shape),)
        return ((dz * (float(g.reshape(-1)[0]) * scale)).reshape(shape),)

    return _wrap(np.asarray(out), (logits,), bw, "softmax_cross_entropy")


def clip_box(x, lo, hi) -> Tensor:
    """Elementwise ``min(max(x, lo), hi)``.

    The gradient passes only where ``lo < x < hi`` strictly; clipped and
    boundary coordinates get exactly zero, so they carry no learning signal.
    ``lo`` and ``hi`` are treated as constants.
    """
    x = as_tensor(x)
    lo = np.asarray(lo.data if isinstance(lo, Tensor) else lo, dtype=x.data.dtype)
    hi = np.asarray(hi.data if isinstance(hi, Tensor) else hi, dtype=x.data.dtype)
    if lo.shape != x.shape or hi.shape != x.shape:
        raise ValueError(f"clip_box shape mismatch: x{x.shape} lo{lo.shape} hi{hi.shape}")
    if np.any(lo > hi):
        raise ValueError("clip_box needs lo <= hi everywhere")
    mask = ((x.data > lo) & (x.data < hi)).astype(x.data.dtype)
    out = np.minimum(np.maximum(x.data, lo), hi)
    return _wrap(out, (x,), lambda g, need: (g * mask,), "clip_box")


def clip_mask(x, lo, hi) -> np.ndarray:
    """The {0,1} gradient mask :func:`clip_box` applies for these bounds."""
    xd = as_tensor(x).data
    return ((xd > np.asarray(lo)) & (xd < np.asarray(hi))).astype(xd.dtype)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, ``x`` as [B, C, H, W] and ``w`` as [O, C, k, k]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch {x.shape} * {w.shape}")
    b, c, h, wd = x.shape
    o, _, k, k2 = w.shape
    if k != k2:
        raise ValueError("square kernels only")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    xshape, pshape = x.shape, xp.shape

    def bw(g, need):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape) if need[1] else None
        gx = None
        if need[0]:
            gcols = (gm @ wmat).reshape(b, ho, wo, c, k, k)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + xshape[2], pad : pad + xshape[3]] if pad else gxp
        return gx, gw

    return _wrap(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def index(a, key) -> Tensor:
    """``a[key]`` for basic or integer-array keys; the gradient scatters back."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g, need):
        ga = np.zeros(shape, dtype=np.float64)
        np.add.at(ga, key, g)
        return (ga,)

    return _wrap(np.array(a.data[key]), (a,), bw, "index")


def unflatten(flat, shapes: Sequence[tuple[int, ...]]) -> list[Tensor]:
    """Split a 1-D tensor into consecutive pieces of the given shapes."""
    out, start = [], 0
    for shp in shapes:
        n = int(np.prod(shp)) if len(shp) else 1
        out.append(reshape(index(flat, slice(start, start + n)), shp))
        start += n
    if start != flat.shape[0]:
        raise ValueError("flat tensor length does not match the shapes")
    return out
