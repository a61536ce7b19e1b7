"""Differentiable ops built on ``Tensor``.

GELU uses the tanh approximation ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``
in both the forward value and its derivative, so finite-difference checks
compare like with like.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import ShapeError, Tensor, as_tensor, unbroadcast


class UndefinedRowError(ValueError):
    """A softmax row had no finite entry."""


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; ``b`` may be a 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else y + bias


def softmax(x, axis=-1):
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise UndefinedRowError("softmax row with every entry -inf")
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), bw, "softmax")


def logsumexp(x, axis=-1):
    """Shifted log-sum-exp over ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise UndefinedRowError("logsumexp row with every entry -inf")
    e = np.exp(x.data - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(tot)).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * (e / tot),)

    return Tensor._make(out, (x,), bw, "logsumexp")


def gelu(x):
    x = as_tensor(x)
    y, dy = kernels.gelu_tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * dy,), "gelu")


def layer_norm(x, gain=None, bias=None, eps=1e-8):
    """Normalize over the last axis, then apply the optional affine ``gain``/``bias``."""
    x = as_tensor(x)
    d = x.shape[-1]
    lead = x.shape[:-1]
    xhat2, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, d), eps)
    xhat = xhat2.reshape(x.shape)

    def bw(g):
        gx = kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat2, rstd)
        return (gx.reshape(lead + (d,)),)

    out = Tensor._make(xhat, (x,), bw, "layer_norm")
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def mse(pred, target):
    """Mean of squared differences over every entry."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    scale = 2.0 / n

    def bw(g):
        gd = g * scale * diff
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return Tensor._make(np.asarray((diff * diff).sum() / n), (pred, target), bw, "mse")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def _check_rows(idx, n):
    idx = np.asarray(idx)
    if idx.size == 0:
        return np.zeros(0, dtype=np.int64)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise IndexError("row indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")
    return idx.astype(np.int64)


def gather_rows(x, idx):
    """``x[idx]`` along the first axis; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = _check_rows(idx, x.shape[0])
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        kernels.index_add_rows(full, idx, np.ascontiguousarray(g))
        return (full,)

    return Tensor._make(out, (x,), bw, "gather_rows")


def scatter_add_rows(base, idx, rows):
    """Return ``base`` with ``rows[i]`` added into row ``idx[i]``."""
    base, rows = as_tensor(base), as_tensor(rows)
    idx = _check_rows(idx, base.shape[0])
    if rows.shape[0] != idx.size or rows.shape[1:] != base.shape[1:]:
        raise ShapeError(f"scatter_add_rows: rows {rows.shape} do not fit base {base.shape}")
    out = np.array(base.data, copy=True)
    kernels.index_add_rows(out, idx, np.ascontiguousarray(rows.data))

    def bw(g):
        return (g if base.requires_grad else None, g[idx] if rows.requires_grad else None)

    return Tensor._make(out, (base, rows), bw, "scatter_add_rows")


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true by a constant; gradient flows elsewhere."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.data)
    return Tensor._make(out, (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")
