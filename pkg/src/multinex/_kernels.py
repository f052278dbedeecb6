"""Compiled loops for the hot spatial operators.

Arrays are (N, H, W, C) contiguous; depthwise kernels are (kh, kw, C) with
zero 'same' padding and stride 1.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _dw_forward(x, k, out):
    N, H, W, C = x.shape
    kh, kw = k.shape[0], k.shape[1]
    ph, pw = kh // 2, kw // 2
    for n in range(N):
        for y in range(H):
            for i in range(kh):
                yy = y + i - ph
                if yy < 0 or yy >= H:
                    continue
                for j in range(kw):
                    dx = j - pw
                    lo = max(0, -dx)
                    hi = min(W, W - dx)
                    for x0 in range(lo, hi):
                        src = x[n, yy, x0 + dx]
                        dst = out[n, y, x0]
                        for c in range(C):
                            dst[c] += src[c] * k[i, j, c]


@njit(cache=True)
def _dw_backward(x, k, g, gx, gk):
    N, H, W, C = x.shape
    kh, kw = k.shape[0], k.shape[1]
    ph, pw = kh // 2, kw // 2
    for n in range(N):
        for y in range(H):
            for i in range(kh):
                yy = y + i - ph
                if yy < 0 or yy >= H:
                    continue
                for j in range(kw):
                    dx = j - pw
                    lo = max(0, -dx)
                    hi = min(W, W - dx)
                    for x0 in range(lo, hi):
                        src = x[n, yy, x0 + dx]
                        gsrc = gx[n, yy, x0 + dx]
                        gv = g[n, y, x0]
                        for c in range(C):
                            gsrc[c] += gv[c] * k[i, j, c]
                            gk[i, j, c] += src[c] * gv[c]


@njit(cache=True)
def _ln_forward(x, scale, shift, eps, xhat, inv, out):
    P, C = x.shape
    for p in range(P):
        mu = 0.0
        for c in range(C):
            mu += x[p, c]
        mu /= C
        var = 0.0
        for c in range(C):
            d = x[p, c] - mu
            var += d * d
        var /= C
        r = 1.0 / np.sqrt(var + eps)
        inv[p] = r
        for c in range(C):
            h = (x[p, c] - mu) * r
            xhat[p, c] = h
            out[p, c] = h * scale[c] + shift[c]


@njit(cache=True)
def _ln_backward(g, xhat, inv, scale, gx, gscale, gshift):
    P, C = g.shape
    for p in range(P):
        m1 = 0.0
        m2 = 0.0
        for c in range(C):
            gh = g[p, c] * scale[c]
            m1 += gh
            m2 += gh * xhat[p, c]
            gscale[c] += g[p, c] * xhat[p, c]
            gshift[c] += g[p, c]
        m1 /= C
        m2 /= C
        for c in range(C):
            gx[p, c] = inv[p] * (g[p, c] * scale[c] - m1 - xhat[p, c] * m2)


def _as4(a, dtype):
    return np.ascontiguousarray(a.reshape((-1,) + a.shape[-3:]), dtype=dtype)


def dwconv(x, k):
    dtype = np.result_type(x, k)
    x4 = _as4(x, dtype)
    out = np.zeros(x4.shape, dtype=dtype)
    _dw_forward(x4, np.ascontiguousarray(k, dtype=dtype), out)
    return out.reshape(x.shape)


def dwconv_grads(x, k, g):
    dtype = np.result_type(x, k, g)
    x4 = _as4(x, dtype)
    gx = np.zeros(x4.shape, dtype=dtype)
    gk = np.zeros(k.shape, dtype=dtype)
    _dw_backward(x4, np.ascontiguousarray(k, dtype=dtype), _as4(g, dtype), gx, gk)
    return gx.reshape(x.shape), gk


def layer_norm(x, scale, shift, eps):
    """Returns (out, xhat, inv_std) for the channel-axis normalisation."""
    dtype = np.result_type(x, scale, shift)
    C = x.shape[-1]
    x2 = np.ascontiguousarray(x.reshape(-1, C), dtype=dtype)
    xhat = np.empty_like(x2)
    out = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=dtype)
    _ln_forward(x2, np.ascontiguousarray(scale, dtype=dtype), np.ascontiguousarray(shift, dtype=dtype),
                eps, xhat, inv, out)
    return out.reshape(x.shape), xhat, inv


def layer_norm_grads(g, xhat, inv, scale):
    C = xhat.shape[-1]
    dtype = xhat.dtype
    g2 = np.ascontiguousarray(g.reshape(-1, C), dtype=dtype)
    gx = np.empty_like(g2)
    gscale = np.zeros(C, dtype=dtype)
    gshift = np.zeros(C, dtype=dtype)
    _ln_backward(g2, xhat, inv, np.ascontiguousarray(scale, dtype=dtype), gx, gscale, gshift)
    return gx.reshape(g.shape), gscale, gshift
