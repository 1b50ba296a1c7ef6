"""Differentiable operations on :class:`~ucddp.engine.tensor.Tensor`.

Every op returns a new Tensor whose backward closure captures only what
it needs. Reductions over the batch go through BLAS or numpy's pairwise
sums, both of which are deterministic for a fixed shape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, ValidationError
from .tensor import Tensor, ensure_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _scalar_like(value, ref: np.ndarray):
    return ref.dtype.type(value)


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=backward)


def sub(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=backward)


def mul(a, b) -> Tensor:
    a = ensure_tensor(a)
    if np.isscalar(b):
        c = _scalar_like(b, a.data)
        return Tensor(a.data * c, parents=(a,), backward_fn=lambda g: (g * c,))
    b = ensure_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=backward)


def square(x: Tensor) -> Tensor:
    two = _scalar_like(2.0, x.data)
    return Tensor(x.data * x.data, parents=(x,), backward_fn=lambda g: (g * two * x.data,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor(out, parents=(x,), backward_fn=lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    scale = _scalar_like(1.0 / x.size, x.data)
    out = np.asarray(x.data.sum() * scale, dtype=x.dtype)
    return Tensor(out, parents=(x,), backward_fn=lambda g: (np.full_like(x.data, g * scale),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum over every axis but the first: [B, ...] -> [B]."""
    flat = x.data.reshape(x.shape[0], -1)

    def backward(g):
        return (np.broadcast_to(g[:, None], flat.shape).reshape(x.shape).copy(),)

    return Tensor(flat.sum(axis=1), parents=(x,), backward_fn=backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor(x.data.reshape(shape), parents=(x,), backward_fn=lambda g: (g.reshape(src),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along the first axis (index may repeat)."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(x.data[index], parents=(x,), backward_fn=backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0).astype(x.dtype), parents=(x,), backward_fn=lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    one = _scalar_like(1.0, out)
    return Tensor(out, parents=(x,), backward_fn=lambda g: (g * (one - out * out),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient passes only where the value was not clipped."""
    lo_, hi_ = _scalar_like(lo, x.data), _scalar_like(hi, x.data)
    out = np.clip(x.data, lo_, hi_)
    inside = (x.data >= lo_) & (x.data <= hi_)
    return Tensor(out, parents=(x,), backward_fn=lambda g: (g * inside,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x:[B,I], w:[I,O], b:[O]."""
    x, w, b = ensure_tensor(x), ensure_tensor(w), ensure_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ConfigurationError(f"linear expects [B,I]·[I,O]+[O], got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ConfigurationError(f"linear shape mismatch: {x.shape} · {w.shape} + {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Tensor(out, parents=(x, w, b), backward_fn=backward)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: padded [B,C,H+2,W+2] -> [B*H*W, C*9]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [B,C,H,W,3,3]
    bsz, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * h * w, c * 9)


def conv2d(x: Tensor, k: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (same spatial size)."""
    x, k, b = ensure_tensor(x), ensure_tensor(k), ensure_tensor(b)
    if stride != 1 or pad != 1:
        raise ConfigurationError("conv2d supports stride=1, pad=1 only")
    if x.data.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3):
        raise ConfigurationError(f"conv2d expects x[B,C,H,W] and k[F,C,3,3], got {x.shape}, {k.shape}")
    bsz, c, h, w = x.shape
    f = k.shape[0]
    if k.shape[1] != c:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, kernel expects {k.shape[1]}")
    if b.shape != (f,):
        raise ConfigurationError(f"conv2d bias must have shape ({f},), got {b.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    kmat = k.data.reshape(f, c * 9)
    out = (cols @ kmat.T + b.data).reshape(bsz, h, w, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * h * w, f)
        gk = (gmat.T @ cols).reshape(k.shape) if k.requires_grad else None
        gb = gmat.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(bsz, h, w, c, 3, 3)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + h, j : j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1])
        return gx, gk, gb

    return Tensor(out, parents=(x, k, b), backward_fn=backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route gradient to the first max."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"maxpool2 expects [B,C,H,W], got {x.shape}")
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
        gx = gblocks.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (np.ascontiguousarray(gx),)

    return Tensor(np.ascontiguousarray(out), parents=(x,), backward_fn=backward)


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ConfigurationError(f"log_softmax expects [B,K], got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return Tensor(out, parents=(x,), backward_fn=backward)


def kl_div_batchmean(log_pred: Tensor, target, atol: float = 1e-6) -> Tensor:
    """Mean over rows of KL(target || exp(log_pred)), with 0·log 0 = 0.

    ``target`` is a constant array of probability rows.
    """
    log_pred = ensure_tensor(log_pred)
    t = np.asarray(target, dtype=log_pred.dtype)
    if t.shape != log_pred.shape or t.ndim != 2:
        raise ConfigurationError(f"target shape {t.shape} does not match log_pred {log_pred.shape}")
    if (t < 0).any():
        raise ValidationError("target rows must be non-negative")
    sums = t.astype(np.float64).sum(axis=1)
    if np.abs(sums - 1.0).max() > atol:
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(f"target row {bad} sums to {sums[bad]!r}, not 1")

    bsz = t.shape[0]
    pos = t > 0
    safe = np.where(pos, t, 1)
    per = np.where(pos, t * (np.log(safe) - log_pred.data), 0)
    scale = log_pred.dtype.type(1.0 / bsz)
    out = np.asarray(per.sum() * scale, dtype=log_pred.dtype)
    return Tensor(out, parents=(log_pred,), backward_fn=lambda g: (-(g * scale) * t,))


def one_hot(index, width: int, dtype=np.float32) -> np.ndarray:
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((index.shape[0], width), dtype=dtype)
    out[np.arange(index.shape[0]), index] = 1
    return out
