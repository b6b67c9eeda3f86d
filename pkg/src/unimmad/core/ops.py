"""Differentiable feature-map primitives: convolution, pooling, resampling."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .autograd import Tensor, add, as_tensor, make, reshape

PADDING_MODES = ("zero", "replicate")


def _pad(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), x.dtype) if mode == "zero" else np.empty(
        (n, c, h + 2 * ph, w + 2 * pw), x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    if mode == "replicate":
        out[:, :, :ph, pw : pw + w] = x[:, :, :1]
        out[:, :, ph + h :, pw : pw + w] = x[:, :, -1:]
        out[:, :, :, :pw] = out[:, :, :, pw : pw + 1]
        out[:, :, :, pw + w :] = out[:, :, :, pw + w - 1 : pw + w]
    return out


def _unpad(g: np.ndarray, ph: int, pw: int, h: int, w: int, mode: str) -> np.ndarray:
    if mode == "zero":
        return g[:, :, ph : ph + h, pw : pw + w]
    rows = g[:, :, ph : ph + h, :].copy()
    if ph:
        rows[:, :, 0, :] += g[:, :, :ph, :].sum(axis=2)
        rows[:, :, -1, :] += g[:, :, ph + h :, :].sum(axis=2)
    out = rows[:, :, :, pw : pw + w].copy()
    if pw:
        out[:, :, :, 0] += rows[:, :, :, :pw].sum(axis=3)
        out[:, :, :, -1] += rows[:, :, :, pw + w :].sum(axis=3)
    return out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "zero", groups: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation with optional channel groups.

    ``kernel`` is (out, in/groups, kh, kw) with odd kh, kw. The output has
    ``ceil(h / stride)`` rows and ``ceil(w / stride)`` columns.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if padding not in PADDING_MODES:
        raise ConfigError(f"unknown padding mode {padding!r}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if groups < 1:
        raise ConfigError(f"groups must be >= 1, got {groups}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c % groups or o % groups:
        raise ConfigError(f"groups={groups} does not divide channels (in={c}, out={o})")
    if c != i * groups:
        raise ShapeError(
            f"input {x.shape} has {c} channels but kernel {kernel.shape} with groups={groups} expects {i * groups}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel sizes, got {kernel.shape}")
    if h * w == 0:
        raise ShapeError(f"empty spatial input {x.shape}")

    g = groups
    og = o // g
    ph, pw = kh // 2, kw // 2
    oh, ow = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = _pad(x.data, ph, pw, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (g, n*oh*ow, i*kh*kw) patch matrix
    cols = (
        win.reshape(n, g, i, oh, ow, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(g, n * oh * ow, i * kh * kw)
    )
    wk = kernel.data.reshape(g, og, i * kh * kw).transpose(0, 2, 1)
    out = np.matmul(cols, wk).reshape(g, n, oh, ow, og).transpose(1, 0, 4, 2, 3).reshape(n, o, oh, ow)
    hp, wp = xp.shape[2], xp.shape[3]

    def fn(gout):
        go = gout.reshape(n, g, og, oh, ow).transpose(1, 0, 3, 4, 2).reshape(g, n * oh * ow, og)
        dk = np.matmul(cols.transpose(0, 2, 1), go).transpose(0, 2, 1).reshape(o, i, kh, kw)
        dcols = (
            np.matmul(go, wk.transpose(0, 2, 1))
            .reshape(g, n, oh, ow, i, kh, kw)
            .transpose(1, 0, 4, 5, 6, 2, 3)
            .reshape(n, c, kh, kw, oh, ow)
        )
        dxp = np.zeros((n, c, hp, wp), dtype=gout.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a : a + stride * (oh - 1) + 1 : stride, b : b + stride * (ow - 1) + 1 : stride] += dcols[
                    :, :, a, b
                ]
        return _unpad(dxp, ph, pw, h, w, padding), dk

    y = make(out, (x, kernel), fn)
    if bias is not None:
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


def gap(x) -> Tensor:
    """Global average pooling to (n, c, 1, 1)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"gap expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError(f"gap over empty spatial plane {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (h * w)
    return make(out, (x,), lambda g: (np.broadcast_to(g * inv, x.shape).astype(x.dtype),))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return make(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the interpolation weights of output sample i.

    Source coordinate is ``(i + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.
    """
    r = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        r[i, i0] += 1.0 - t
        r[i, i1] += t
    r.flags.writeable = False
    return r


def gaussian_taps(sigma: float) -> np.ndarray:
    radius = math.ceil(4 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(xs**2) / (2 * sigma * sigma))
    return taps / taps.sum()


@lru_cache(maxsize=64)
def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing along one axis with replicate borders."""
    taps = gaussian_taps(sigma)
    radius = (len(taps) - 1) // 2
    b = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for k, t in enumerate(taps):
            j = min(max(i + k - radius, 0), n - 1)
            b[i, j] += t
    b.flags.writeable = False
    return b


def _separable(x: Tensor, rh: np.ndarray, rw: np.ndarray) -> Tensor:
    # evaluated in double then rounded back, so constants survive exactly in single precision
    dt = x.dtype
    out = np.matmul(rh, np.matmul(x.data.astype(np.float64), rw.T)).astype(dt)

    def fn(g):
        return (np.matmul(rh.T, np.matmul(g.astype(np.float64), rw)).astype(dt),)

    return make(out, (x,), fn)


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres and edge clamping."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects rank-4 input, got {x.shape}")
    return _separable(x, bilinear_matrix(x.shape[2], out_h), bilinear_matrix(x.shape[3], out_w))


def gaussian_blur(x, sigma: float) -> Tensor:
    """Gaussian smoothing, truncated at ``ceil(4 * sigma)``, replicate borders."""
    x = as_tensor(x)
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if x.ndim != 4:
        raise ShapeError(f"gaussian_blur expects rank-4 input, got {x.shape}")
    return _separable(x, blur_matrix(x.shape[2], float(sigma)), blur_matrix(x.shape[3], float(sigma)))


def compose(weights, bases) -> Tensor:
    """Per-output-channel mixture of base kernels.

    ``weights`` is (n_exp, O) and ``bases`` (n_exp, O, I, k, k); the result
    is ``sum_i weights[i, o] * bases[i, o]``, accumulated in base-expert order.
    """
    weights, bases = as_tensor(weights), as_tensor(bases)
    sw, wb = weights.data, bases.data
    if sw.shape != wb.shape[:2]:
        raise ShapeError(f"weights {sw.shape} do not match bases {wb.shape}")
    acc = sw[0][:, None, None, None] * wb[0]
    for i in range(1, sw.shape[0]):
        acc = acc + sw[i][:, None, None, None] * wb[i]

    def fn(g):
        dw = (wb * g[None]).sum(axis=(2, 3, 4))
        db = sw[:, :, None, None, None] * g[None]
        return dw, db

    return make(acc, (weights, bases), fn)
