"""Pure-numpy implementations of the hot array kernels.

Convolutions are done as im2col + GEMM so BLAS carries the load.  The numba
backend in ``_kernels_nb`` mirrors these signatures with explicit loops; the
dispatch lives in ``backend``.
"""

import numpy as np


def _im2col(xp, kh, kw, out_h, out_w):
    # (B, C, Hp, Wp) -> (B, C*kh*kw, out_h*out_w) patch matrix
    b, c, hp, wp = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, c, kh, kw, out_h, out_w)
    strides = (sb, sc, sh, sw, sh, sw)
    patches = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)
    return patches.reshape(b, c * kh * kw, out_h * out_w)


def conv2d_fwd(x, w, bias, pad):
    """Correlate x (B,Ci,H,W) with w (Co,Ci,kh,kw), zero padding ``pad``."""
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    out_h = h + 2 * pad - kh + 1
    out_w = wd + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, out_h, out_w)
    out = np.matmul(w.reshape(co, -1), cols)
    if bias is not None:
        out += bias.reshape(1, co, 1)
    return out.reshape(b, co, out_h, out_w)


def conv2d_fwd_dynamic(x, w, bias, pad):
    """Per-sample weights: w has shape (B,Co,Ci,kh,kw)."""
    b, ci, h, wd = x.shape
    _, co, _, kh, kw = w.shape
    out_h = h + 2 * pad - kh + 1
    out_w = wd + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, out_h, out_w)
    out = np.matmul(w.reshape(b, co, -1), cols)
    if bias is not None:
        out += bias.reshape(1, co, 1)
    return out.reshape(b, co, out_h, out_w)


def conv2d_grad_w(x, gy, kh, kw, pad, per_sample):
    """Weight gradient for the correlation above.

    Returns (Co,Ci,kh,kw), or (B,Co,Ci,kh,kw) when ``per_sample``.
    """
    b, ci, h, wd = x.shape
    _, co, out_h, out_w = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, out_h, out_w)
    gy2 = gy.reshape(b, co, out_h * out_w)
    gw = np.matmul(gy2, cols.transpose(0, 2, 1))
    if not per_sample:
        gw = gw.sum(axis=0)
        return gw.reshape(co, ci, kh, kw)
    return gw.reshape(b, co, ci, kh, kw)


def block_mean(x, c):
    """Average every c-by-c block of the last two axes."""
    m1 = x.shape[-2] // c
    m2 = x.shape[-1] // c
    r = x.reshape(x.shape[:-2] + (m1, c, m2, c))
    return r.mean(axis=(-3, -1))


def block_replicate(y, c):
    """Nearest-replication upsample of the last two axes by factor c."""
    out = np.broadcast_to(
        y[..., :, None, :, None],
        y.shape[:-2] + (y.shape[-2], c, y.shape[-1], c),
    )
    return out.reshape(y.shape[:-2] + (y.shape[-2] * c, y.shape[-1] * c)).copy()


def block_sum_within(x, c):
    """Replace every entry by the sum over its own c-by-c block."""
    m1 = x.shape[-2] // c
    m2 = x.shape[-1] // c
    s = x.reshape(x.shape[:-2] + (m1, c, m2, c)).sum(axis=(-3, -1))
    return block_replicate(s, c)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
