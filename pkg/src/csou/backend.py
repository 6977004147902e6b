"""Kernel backend selection.

Two interchangeable implementations of the hot kernels exist: numba
(``_kernels_nb``, explicit loops under ``@njit``) and pure numpy
(``_kernels_np``, im2col + BLAS).  The active one is chosen by the
``CSOU_BACKEND`` environment variable at import time:

    CSOU_BACKEND=numba   force numba (error if unavailable)
    CSOU_BACKEND=numpy   force the pure-numpy path
    CSOU_BACKEND=auto    numba when importable, else numpy (default)

``set_backend`` flips the choice at runtime, which the kernel benchmark and
the equivalence tests rely on.  Both paths produce the same values up to
floating-point reassociation.
"""

import os

import numpy as np

from . import _kernels_np

try:
    from . import _kernels_nb

    HAS_NUMBA = True
except ImportError:
    _kernels_nb = None
    HAS_NUMBA = False

_KERNEL_NAMES = (
    "conv2d_fwd",
    "conv2d_fwd_dynamic",
    "conv2d_grad_w",
    "block_mean",
    "block_replicate",
    "block_sum_within",
    "soft_threshold",
)

_impls = {"numpy": {name: getattr(_kernels_np, name) for name in _KERNEL_NAMES}}
if HAS_NUMBA:
    _impls["numba"] = {name: getattr(_kernels_nb, name) for name in _KERNEL_NAMES}

_active_name = None
_active = None


def available_backends():
    return tuple(sorted(_impls))


def set_backend(name):
    """Select the kernel implementation; name is 'numba', 'numpy' or 'auto'."""
    global _active_name, _active
    if name == "auto":
        name = "numba" if HAS_NUMBA else "numpy"
    if name not in _impls:
        raise ValueError(
            "unknown backend %r (available: %s)" % (name, ", ".join(available_backends()))
        )
    _active_name = name
    _active = _impls[name]


def get_backend():
    return _active_name


set_backend(os.environ.get("CSOU_BACKEND", "auto"))


def conv2d_fwd(x, w, bias=None, pad=0):
    """2-d correlation; w (Co,Ci,kh,kw) shared or (B,Co,Ci,kh,kw) per sample."""
    if w.ndim == 5:
        return _active["conv2d_fwd_dynamic"](x, w, bias, pad)
    return _active["conv2d_fwd"](x, w, bias, pad)


def conv2d_grad_w(x, gy, kh, kw, pad, per_sample=False):
    return _active["conv2d_grad_w"](x, gy, kh, kw, pad, per_sample)


def conv2d_grad_x(w, gy, pad):
    """Input gradient of conv2d_fwd, as a full correlation with the
    channel-transposed, spatially flipped weights."""
    if w.ndim == 5:
        wt = np.ascontiguousarray(w.transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1])
        kh = w.shape[3]
    else:
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[..., ::-1, ::-1])
        kh = w.shape[2]
    return conv2d_fwd(gy, wt, None, kh - 1 - pad)


def block_mean(x, c):
    return _active["block_mean"](x, c)


def block_replicate(y, c):
    return _active["block_replicate"](y, c)


def block_sum_within(x, c):
    return _active["block_sum_within"](x, c)


def soft_threshold(x, t):
    return _active["soft_threshold"](x, t)
