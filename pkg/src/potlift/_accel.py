"""Hot inner kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and ``POTLIFT_NUMBA`` is
not set to ``0``/``false``/``off``. Both paths are always importable under
``numpy_kernels`` and ``numba_kernels`` so they can be compared directly.

All row kernels operate on 2D C-contiguous arrays; callers reshape.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf as _erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- numpy path


def _np_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def _np_layernorm_rows(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def _np_layernorm_rows_backward(gxhat, xhat, rstd):
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (gxhat - m1 - xhat * m2)


def _np_gelu(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT_HALF))


def _np_gelu_grad(x):
    return 0.5 * (1.0 + _erf(x * _SQRT_HALF)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _np_bfs_all_pairs(n, indptr, indices):
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for k in range(indptr[u], indptr[u + 1]):
                    v = indices[k]
                    if dist[src, v] < 0:
                        dist[src, v] = dist[src, u] + 1
                        nxt.append(v)
            frontier = nxt
    return dist


numpy_kernels = SimpleNamespace(
    softmax_rows=_np_softmax_rows,
    softmax_rows_backward=_np_softmax_rows_backward,
    layernorm_rows=_np_layernorm_rows,
    layernorm_rows_backward=_np_layernorm_rows_backward,
    gelu=_np_gelu,
    gelu_grad=_np_gelu_grad,
    bfs_all_pairs=_np_bfs_all_pairs,
    name="numpy",
)


# ---------------------------------------------------------------- numba path


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_rows(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def softmax_rows_backward(y, gy):
        n, m = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gy[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @njit(cache=True)
    def layernorm_rows(x, eps):
        n, m = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = x[i, j] - mu
                var += d * d
            var /= m
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(m):
                xhat[i, j] = (x[i, j] - mu) * r
        return xhat, rstd

    @njit(cache=True)
    def layernorm_rows_backward(gxhat, xhat, rstd):
        n, m = xhat.shape
        out = np.empty_like(xhat)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(m):
                m1 += gxhat[i, j]
                m2 += gxhat[i, j] * xhat[i, j]
            m1 /= m
            m2 /= m
            for j in range(m):
                out[i, j] = rstd[i] * (gxhat[i, j] - m1 - xhat[i, j] * m2)
        return out

    @njit(cache=True)
    def _gelu_flat(x, out):
        for k in range(x.size):
            v = x[k]
            out[k] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))

    @njit(cache=True)
    def _gelu_grad_flat(x, out):
        for k in range(x.size):
            v = x[k]
            out[k] = 0.5 * (1.0 + math.erf(v * _SQRT_HALF)) + v * math.exp(-0.5 * v * v) * _INV_SQRT_2PI

    def gelu(x):
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _gelu_flat(flat, out)
        return out.reshape(x.shape)

    def gelu_grad(x):
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _gelu_grad_flat(flat, out)
        return out.reshape(x.shape)

    @njit(cache=True)
    def bfs_all_pairs(n, indptr, indices):
        dist = np.full((n, n), -1, dtype=np.int64)
        queue = np.empty(n, dtype=np.int64)
        for src in range(n):
            dist[src, src] = 0
            head = 0
            tail = 1
            queue[0] = src
            while head < tail:
                u = queue[head]
                head += 1
                for k in range(indptr[u], indptr[u + 1]):
                    v = indices[k]
                    if dist[src, v] < 0:
                        dist[src, v] = dist[src, u] + 1
                        queue[tail] = v
                        tail += 1
        return dist

    return SimpleNamespace(
        softmax_rows=softmax_rows,
        softmax_rows_backward=softmax_rows_backward,
        layernorm_rows=layernorm_rows,
        layernorm_rows_backward=layernorm_rows_backward,
        gelu=gelu,
        gelu_grad=gelu_grad,
        bfs_all_pairs=bfs_all_pairs,
        name="numba",
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_kernels = None

NUMBA_REQUESTED = os.environ.get("POTLIFT_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")
USE_NUMBA = NUMBA_REQUESTED and numba_kernels is not None

kernels = numba_kernels if USE_NUMBA else numpy_kernels
