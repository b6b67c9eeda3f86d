"""Tape-based reverse-mode differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`GradTape` only
when at least one input requires a gradient, so inference code paths (no
tape) pay nothing beyond the numpy call itself.
"""

from __future__ import annotations

from numbers import Number
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError

_TAPES: list["GradTape"] = []


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class GradTape:
    """Ordered record of primitive applications.

    Use as a context manager; every differentiable op executed inside the
    block appends ``(output, inputs, backward_fn)``.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> "Gradients":
        return backward(loss, self)


class Gradients:
    """Mapping tensor -> gradient array; unreached tensors get exact zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Replay ``tape`` in reverse from the scalar ``loss``."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return Gradients(grads)


def no_tape_active() -> bool:
    return not _TAPES


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Number) and like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording ``fn`` if differentiation is live."""
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].records.append((out, tuple(parents), fn))
    return out


def stop_gradient(x) -> Tensor:
    """Same values, severed from the tape."""
    x = as_tensor(x)
    return Tensor(x.data)


sg = stop_gradient


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent."""
    a = as_tensor(a)
    x = a.data
    if p == 0:
        return make(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),))
    return make(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        # subgradient 0 at the origin keeps sqrt(0) usable inside losses
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype),)

    return make(out, (a,), fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make(np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    mask = x > 0
    # np.maximum keeps NaN so non-finite values stay visible downstream
    return make(np.maximum(x, 0).astype(x.dtype), (a,), lambda g: (g * mask,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` with a constant floor."""
    a = as_tensor(a)
    x = a.data
    mask = x >= floor
    out = np.where(mask, x, np.asarray(floor, dtype=x.dtype))
    return make(out, (a,), lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def fn(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, key, g)
        return (z,)

    return make(np.asarray(a.data[key]), (a,), fn)


def take(a, indices, axis=0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    shape, dtype = a.shape, a.dtype

    def fn(g):
        z = np.zeros(shape, dtype=dtype)
        zm = np.moveaxis(z, axis, 0)
        gm = np.moveaxis(g, axis, 0) if idx.ndim else np.expand_dims(g, 0)
        np.add.at(zm, idx.reshape(-1), gm.reshape((-1,) + zm.shape[1:]))
        return (z,)

    return make(np.take(a.data, idx, axis=axis), (a,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return make(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )
