"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature and
the same results (to rounding of transcendental functions).
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def gelu_tanh(x):
    """Tanh-approximate GELU. Returns ``(y, dy/dx)`` in one pass."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return y, dy


def layer_norm_fwd(x, eps):
    """Row-wise standardization of a 2-D array. Returns ``(xhat, rstd)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0].copy()


def layer_norm_bwd(g_xhat, xhat, rstd):
    """Gradient through ``xhat = (x - mean) * rstd`` for 2-D rows."""
    m1 = g_xhat.mean(axis=1, keepdims=True)
    m2 = (g_xhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (g_xhat - m1 - xhat * m2)


def index_add_rows(out, idx, rows):
    """In place ``out[idx[i]] += rows[i]`` with repeated indices accumulating."""
    np.add.at(out, idx, rows)
    return out


def top1_dispatch(logits):
    """Top-1 expert per row (lowest index on ties) and a token order grouped by expert.

    Returns ``(choice, order, counts)``: ``order`` lists row indices sorted
    stably by chosen expert, ``counts[e]`` rows went to expert ``e``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    choice = np.argmax(logits, axis=1).astype(np.int64)
    order = np.argsort(choice, kind="stable").astype(np.int64)
    counts = np.bincount(choice, minlength=logits.shape[1]).astype(np.int64)
    return choice, order, counts


def last_writer_map(rows, cols, height, width):
    """Index of the last write landing on each pixel, -1 where nothing was written.

    Writes happen in array order, so a later entry overwrites an earlier one.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.full(height * width, -1, dtype=np.int64)
    np.maximum.at(out, rows * width + cols, np.arange(rows.size, dtype=np.int64))
    return out.reshape(height, width)


def rasterize_disks(height, width, background, centers, radii, colors, supersample):
    """Composite antialiased disks over a background, in order.

    ``background`` is ``(height, width, 3)``; each disk covers a pixel by the
    fraction of its ``supersample**2`` sub-samples that fall inside the circle.
    """
    img = np.array(background, dtype=np.float64, copy=True)
    s = int(supersample)
    offs = (np.arange(s) + 0.5) / s
    ys = (np.arange(height)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(width)[:, None] + offs[None, :]).reshape(-1)
    for (cx, cy), r, col in zip(np.asarray(centers), np.asarray(radii), np.asarray(colors)):
        inside = ((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) <= r * r
        cov = inside.reshape(height, s, width, s).mean(axis=(1, 3))
        img += cov[:, :, None] * (np.asarray(col, dtype=np.float64)[None, None, :] - img)
    return img
