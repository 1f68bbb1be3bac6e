"""Compiled loops for the depthwise convolution, the hot spot of every block.

Loops run with the pixel column innermost so they vectorize.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def dw_forward(x, w, out):
    n, c, ho, wo = out.shape
    k = w.shape[-1]
    out[:] = 0
    for a in range(n):
        for ch in range(c):
            for di in range(k):
                for dj in range(k):
                    wv = w[ch, di, dj]
                    for i in range(ho):
                        for j in range(wo):
                            out[a, ch, i, j] += wv * x[a, ch, i + di, j + dj]


@numba.njit(cache=True, fastmath=True)
def dw_backward(x, w, g, gx, gw):
    n, c, ho, wo = g.shape
    k = w.shape[-1]
    for a in range(n):
        for ch in range(c):
            for di in range(k):
                for dj in range(k):
                    wv = w[ch, di, dj]
                    acc = 0.0
                    for i in range(ho):
                        for j in range(wo):
                            acc += x[a, ch, i + di, j + dj] * g[a, ch, i, j]
                        for j in range(wo):
                            gx[a, ch, i + di, j + dj] += wv * g[a, ch, i, j]
                    gw[ch, di, dj] += acc


def depthwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 depthwise correlation; ``w`` is ``c x k x k``."""
    k = w.shape[-1]
    n, c, h, wd = x.shape
    dtype = np.result_type(x, w)
    out = np.empty((n, c, h - k + 1, wd - k + 1), dtype=dtype)
    dw_forward(np.ascontiguousarray(x, dtype=dtype), np.ascontiguousarray(w, dtype=dtype), out)
    return out


def depthwise_grad(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    dtype = np.result_type(x, w, g)
    gx = np.zeros(x.shape, dtype=dtype)
    gw = np.zeros(w.shape, dtype=dtype)
    dw_backward(np.ascontiguousarray(x, dtype=dtype), np.ascontiguousarray(w, dtype=dtype),
                np.ascontiguousarray(g, dtype=dtype), gx, gw)
    return gx, gw
