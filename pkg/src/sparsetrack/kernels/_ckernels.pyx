# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_fallback``: fused elementwise passes and the loops numpy
cannot vectorize (ordered overwrites, grouped dispatch, supersampled raster)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def gelu_tanh(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t n = xf.shape[0], i
    y = np.empty(n, dtype=np.float64)
    dy = np.empty(n, dtype=np.float64)
    cdef double[::1] yv = y
    cdef double[::1] dv = dy
    cdef double[::1] xv = xf
    cdef double v, v2, t, z, em
    with nogil:
        for i in range(n):
            v = xv[i]
            v2 = v * v
            z = GELU_C * (v + GELU_A * v2 * v)
            # tanh(|z|) = (1 - e) / (1 + e) with e = exp(-2|z|) never overflows
            em = exp(-2.0 * fabs(z))
            t = (1.0 - em) / (1.0 + em)
            if z < 0:
                t = -t
            yv[i] = 0.5 * v * (1.0 + t)
            dv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2)
    shape = np.shape(x)
    return y.reshape(shape), dy.reshape(shape)


def layer_norm_fwd(x, double eps):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    xhat = np.empty((n, d), dtype=np.float64)
    rstd = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] hv = xhat
    cdef double[::1] rv = rstd
    cdef double mu, var, c, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += xv[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = xv[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rv[i] = r
            for j in range(d):
                hv[i, j] = (xv[i, j] - mu) * r
    return xhat, rstd


def layer_norm_bwd(g_xhat, xhat, rstd):
    cdef double[:, ::1] gv = np.ascontiguousarray(g_xhat, dtype=np.float64)
    cdef double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef double[::1] rv = np.ascontiguousarray(rstd, dtype=np.float64)
    cdef Py_ssize_t n = gv.shape[0], d = gv.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double m1, m2
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                m1 += gv[i, j]
                m2 += gv[i, j] * hv[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                ov[i, j] = rv[i] * (gv[i, j] - m1 - hv[i, j] * m2)
    return out


def index_add_rows(out, idx, rows):
    cdef double[:, ::1] ov = out.reshape(out.shape[0], -1)
    cdef double[:, ::1] rv = np.ascontiguousarray(rows, dtype=np.float64).reshape(len(idx), -1)
    cdef long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t n = iv.shape[0], d = ov.shape[1], i, j, r
    with nogil:
        for i in range(n):
            r = iv[i]
            for j in range(d):
                ov[r, j] += rv[i, j]
    return out


def top1_dispatch(logits):
    cdef double[:, ::1] lv = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = lv.shape[0], e = lv.shape[1], i, j, best
    choice = np.empty(n, dtype=np.int64)
    counts = np.zeros(e, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    starts = np.zeros(e, dtype=np.int64)
    cdef long long[::1] cv = choice
    cdef long long[::1] kv = counts
    cdef long long[::1] ov = order
    cdef long long[::1] sv = starts
    cdef double m
    with nogil:
        for i in range(n):
            best = 0
            m = lv[i, 0]
            for j in range(1, e):
                if lv[i, j] > m:
                    m = lv[i, j]
                    best = j
            cv[i] = best
            kv[best] += 1
        for j in range(1, e):
            sv[j] = sv[j - 1] + kv[j - 1]
        for i in range(n):
            ov[sv[cv[i]]] = i
            sv[cv[i]] += 1
    return choice, order, counts


def last_writer_map(rows, cols, Py_ssize_t height, Py_ssize_t width):
    cdef long long[::1] rv = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    cdef long long[::1] cv = np.ascontiguousarray(cols, dtype=np.int64).reshape(-1)
    out = np.full((height, width), -1, dtype=np.int64)
    cdef long long[:, ::1] ov = out
    cdef Py_ssize_t n = rv.shape[0], i
    with nogil:
        for i in range(n):
            ov[rv[i], cv[i]] = i
    return out


def rasterize_disks(Py_ssize_t height, Py_ssize_t width, background, centers, radii, colors, int supersample):
    img = np.array(background, dtype=np.float64, copy=True, order="C")
    cdef double[:, :, ::1] iv = img
    cdef double[:, ::1] cen = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2)
    cdef double[::1] rad = np.ascontiguousarray(radii, dtype=np.float64).reshape(-1)
    cdef double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t nd = cen.shape[0], k, y, x, a, b, ch, y0, y1, x0, x1
    cdef int s = supersample
    cdef double cx, cy, r2, py, px, dy, dx, cov, nsub = s * s
    cdef int count
    with nogil:
        for k in range(nd):
            cx = cen[k, 0]
            cy = cen[k, 1]
            r2 = rad[k] * rad[k]
            y0 = <Py_ssize_t>(cy - rad[k]) - 1
            y1 = <Py_ssize_t>(cy + rad[k]) + 2
            x0 = <Py_ssize_t>(cx - rad[k]) - 1
            x1 = <Py_ssize_t>(cx + rad[k]) + 2
            if y0 < 0:
                y0 = 0
            if x0 < 0:
                x0 = 0
            if y1 > height:
                y1 = height
            if x1 > width:
                x1 = width
            for y in range(y0, y1):
                for x in range(x0, x1):
                    count = 0
                    for a in range(s):
                        py = y + (a + 0.5) / s
                        dy = py - cy
                        for b in range(s):
                            px = x + (b + 0.5) / s
                            dx = px - cx
                            if dy * dy + dx * dx <= r2:
                                count += 1
                    if count == 0:
                        continue
                    cov = count / nsub
                    for ch in range(3):
                        iv[y, x, ch] += cov * (col[k, ch] - iv[y, x, ch])
    return img
