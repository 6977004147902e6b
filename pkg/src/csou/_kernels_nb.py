"""Numba implementations of the hot array kernels.

Same contracts as ``_kernels_np``; plain loops compiled with ``@njit``.
Importing this module raises ImportError when numba is absent, which the
backend dispatcher treats as "numpy only".
"""

import numpy as np
from numba import njit

_jit_kwargs = {"cache": True, "fastmath": True, "nogil": True}


@njit(**_jit_kwargs)
def _conv2d_core(xp, w, out):
    # innermost loop runs stride-1 along the output row so it vectorizes
    b, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    _, _, out_h, out_w = out.shape
    for n in range(b):
        for o in range(co):
            for i in range(out_h):
                orow = out[n, o, i]
                for j in range(out_w):
                    orow[j] = 0
                for q in range(ci):
                    for di in range(kh):
                        xrow = xp[n, q, i + di]
                        for dj in range(kw):
                            wv = w[o, q, di, dj]
                            for j in range(out_w):
                                orow[j] += xrow[j + dj] * wv


@njit(**_jit_kwargs)
def _conv2d_core_dynamic(xp, w, out):
    b, ci, hp, wp = xp.shape
    _, co, _, kh, kw = w.shape
    _, _, out_h, out_w = out.shape
    for n in range(b):
        for o in range(co):
            for i in range(out_h):
                orow = out[n, o, i]
                for j in range(out_w):
                    orow[j] = 0
                for q in range(ci):
                    for di in range(kh):
                        xrow = xp[n, q, i + di]
                        for dj in range(kw):
                            wv = w[n, o, q, di, dj]
                            for j in range(out_w):
                                orow[j] += xrow[j + dj] * wv


@njit(**_jit_kwargs)
def _grad_w_core(xp, gy, gw):
    b, ci, hp, wp = xp.shape
    _, co, out_h, out_w = gy.shape
    _, _, _, kh, kw = gw.shape
    for n in range(b):
        for o in range(co):
            for q in range(ci):
                for di in range(kh):
                    for dj in range(kw):
                        acc = xp[n, q, 0, 0] * 0  # dtype-preserving zero
                        for i in range(out_h):
                            grow = gy[n, o, i]
                            xrow = xp[n, q, i + di]
                            for j in range(out_w):
                                acc += grow[j] * xrow[j + dj]
                        gw[n, o, q, di, dj] = acc


def _padded(x, pad):
    if pad:
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(x)


def conv2d_fwd(x, w, bias, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    out = np.empty((b, co, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1), dtype=x.dtype)
    _conv2d_core(_padded(x, pad), np.ascontiguousarray(w), out)
    if bias is not None:
        out += bias.reshape(1, co, 1, 1)
    return out


def conv2d_fwd_dynamic(x, w, bias, pad):
    b, ci, h, wd = x.shape
    _, co, _, kh, kw = w.shape
    out = np.empty((b, co, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1), dtype=x.dtype)
    _conv2d_core_dynamic(_padded(x, pad), np.ascontiguousarray(w), out)
    if bias is not None:
        out += bias.reshape(1, co, 1, 1)
    return out


def conv2d_grad_w(x, gy, kh, kw, pad, per_sample):
    b, ci = x.shape[0], x.shape[1]
    co = gy.shape[1]
    gw = np.empty((b, co, ci, kh, kw), dtype=x.dtype)
    _grad_w_core(_padded(x, pad), np.ascontiguousarray(gy), gw)
    if not per_sample:
        return gw.sum(axis=0)
    return gw


@njit(**_jit_kwargs)
def _block_mean_core(x3, c, out3):
    n, m1, m2 = out3.shape
    inv = 1.0 / (c * c)
    for k in range(n):
        for i in range(m1):
            for j in range(m2):
                acc = 0.0
                for di in range(c):
                    for dj in range(c):
                        acc += x3[k, i * c + di, j * c + dj]
                out3[k, i, j] = acc * inv


@njit(**_jit_kwargs)
def _block_replicate_core(y3, c, out3):
    n, m1, m2 = y3.shape
    for k in range(n):
        for i in range(m1):
            for j in range(m2):
                v = y3[k, i, j]
                for di in range(c):
                    for dj in range(c):
                        out3[k, i * c + di, j * c + dj] = v


@njit(**_jit_kwargs)
def _block_sum_within_core(x3, c, out3):
    n, n1, n2 = x3.shape
    m1 = n1 // c
    m2 = n2 // c
    for k in range(n):
        for i in range(m1):
            for j in range(m2):
                acc = 0.0
                for di in range(c):
                    for dj in range(c):
                        acc += x3[k, i * c + di, j * c + dj]
                for di in range(c):
                    for dj in range(c):
                        out3[k, i * c + di, j * c + dj] = acc


def block_mean(x, c):
    lead = x.shape[:-2]
    x3 = np.ascontiguousarray(x).reshape((-1,) + x.shape[-2:])
    out3 = np.empty((x3.shape[0], x.shape[-2] // c, x.shape[-1] // c), dtype=x.dtype)
    _block_mean_core(x3, c, out3)
    return out3.reshape(lead + out3.shape[-2:])


def block_replicate(y, c):
    lead = y.shape[:-2]
    y3 = np.ascontiguousarray(y).reshape((-1,) + y.shape[-2:])
    out3 = np.empty((y3.shape[0], y.shape[-2] * c, y.shape[-1] * c), dtype=y.dtype)
    _block_replicate_core(y3, c, out3)
    return out3.reshape(lead + out3.shape[-2:])


def block_sum_within(x, c):
    lead = x.shape[:-2]
    x3 = np.ascontiguousarray(x).reshape((-1,) + x.shape[-2:])
    out3 = np.empty_like(x3)
    _block_sum_within_core(x3, c, out3)
    return out3.reshape(lead + x.shape[-2:])


@njit(**_jit_kwargs)
def _soft_threshold_core(xf, tf, out):
    for i in range(xf.size):
        v = xf[i]
        t = tf[i]
        a = abs(v) - t
        if a < 0.0:
            a = 0.0
        out[i] = a if v > 0.0 else -a


def soft_threshold(x, t):
    x = np.asarray(x)
    tb = np.broadcast_to(np.asarray(t, dtype=x.dtype), x.shape)
    out = np.empty(x.size, dtype=x.dtype)
    _soft_threshold_core(np.ascontiguousarray(x).ravel(), np.ascontiguousarray(tb).ravel(), out)
    return out.reshape(x.shape)
