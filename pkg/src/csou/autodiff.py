"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray plus, when gradients are wanted, the closure
that maps its output gradient onto its parents' gradients.  Creating a tensor
from an op appends it (implicitly, via monotone ids) to the tape, so reverse
creation order is a valid topological order for backpropagation.

Only the operators the unfolded network needs are provided.  Convolutions and
the block-structured linear solve delegate to the selected kernel backend.

Conventions:
    - kink subgradients are zero: soft_threshold passes no gradient at
      |x| == theta, relu none at 0, channel_max routes ties to the lowest
      channel index;
    - ``backward`` requires a scalar loss, accumulates into ``.grad`` of every
      requires_grad tensor, and refuses to run twice on the same loss.
"""

import itertools

import numpy as np

from . import backend

_grad_enabled = True
_order = itertools.count()


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop", "_id", "_ran")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backprop = None
        self._id = next(_order)
        self._ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return "Tensor(shape=%s, grad=%s)" % (self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)


def param(data, dtype=np.float64):
    """Leaf tensor that collects gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def as_tensor(v, like=None):
    if isinstance(v, Tensor):
        return v
    dtype = like.dtype if like is not None else None
    arr = np.asarray(v, dtype=dtype) if dtype is not None else np.asarray(v, dtype=np.float64)
    return Tensor(arr)


def _from_op(data, parents, backprop):
    t = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backprop = backprop
    return t


def _pair(a, b):
    # lift the non-tensor side to the tensor side's dtype
    if isinstance(a, Tensor):
        return a, (b if isinstance(b, Tensor) else as_tensor(b, like=a))
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def backward(loss: Tensor):
    """Propagate d(loss)/d(node) to every requires_grad tensor in the graph."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss, got shape %s" % (loss.shape,))
    if loss._ran:
        raise RuntimeError("backward already ran for this tensor; rebuild the graph")
    loss._ran = True

    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backprop is None:
            continue
        for p, pg in zip(node._parents, node._backprop(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def backprop(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(out, (a, b), backprop)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def backprop(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _from_op(out, (a, b), backprop)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def backprop(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _from_op(out, (a, b), backprop)


def neg(a):
    a = as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def scale(a, s):
    """Multiply by a python scalar (kept out of the graph)."""
    a = as_tensor(a)
    s = float(s)
    return _from_op(a.data * s, (a,), lambda g: (g * s,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backprop(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(out, tuple(ts), backprop)


def tsum(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backprop(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True),)

    return _from_op(out, (a,), backprop)


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def backprop(g):
        return ((np.broadcast_to(g, a.data.shape) / n).astype(a.dtype, copy=True),)

    return _from_op(out, (a,), backprop)


def silu(a):
    a = as_tensor(a)
    # tanh form of the sigmoid avoids exp overflow for large |x|
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def backprop(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _from_op(out, (a,), backprop)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backprop(g):
        return (g * (1.0 - out * out),)

    return _from_op(out, (a,), backprop)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)

    def backprop(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _from_op(out, (a,), backprop)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backprop(g):
        return (g * (a.data > 0.0),)

    return _from_op(out, (a,), backprop)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _from_op(out, (a,), backprop)


def soft_threshold(x, theta):
    """Shrinkage with differentiable threshold; zero subgradient at the kink."""
    x, theta = _pair(x, theta)
    if np.any(theta.data < 0):
        raise ValueError("threshold must be nonnegative")
    out = backend.soft_threshold(x.data, theta.data)
    mask = np.abs(x.data) > theta.data

    def backprop(g):
        gx = g * mask
        gt = _unbroadcast(-g * np.sign(x.data) * mask, theta.data.shape)
        return gx, gt

    return _from_op(out, (x, theta), backprop)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backprop(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(out, (a, b), backprop)


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv2d(x, w, b=None, pad=0):
    """2-d correlation; shared (Co,Ci,k,k) or per-sample (B,Co,Ci,k,k) weights."""
    x, w = as_tensor(x), as_tensor(w)
    parents = [x, w]
    bias = None
    if b is not None:
        b = as_tensor(b)
        parents.append(b)
        bias = b.data
    per_sample = w.data.ndim == 5
    kh, kw = w.data.shape[-2:]
    out = backend.conv2d_fwd(x.data, w.data, bias, pad)

    def backprop(g):
        g = np.ascontiguousarray(g)
        gx = backend.conv2d_grad_x(w.data, g, pad) if x.requires_grad else None
        gw = (
            backend.conv2d_grad_w(x.data, g, kh, kw, pad, per_sample)
            if w.requires_grad
            else None
        )
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return _from_op(out, tuple(parents), backprop)


def channel_avg(a):
    """Mean across channels: (B,C,H,W) -> (B,1,H,W)."""
    a = as_tensor(a)
    c = a.data.shape[1]
    out = a.data.mean(axis=1, keepdims=True)

    def backprop(g):
        return (np.broadcast_to(g / c, a.data.shape).astype(a.dtype, copy=True),)

    return _from_op(out, (a,), backprop)


def channel_max(a):
    """Max across channels: (B,C,H,W) -> (B,1,H,W); ties go to the lowest index."""
    a = as_tensor(a)
    idx = a.data.argmax(axis=1)
    out = np.take_along_axis(a.data, idx[:, None], axis=1)

    def backprop(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[:, None], g, axis=1)
        return (ga,)

    return _from_op(out, (a,), backprop)


def global_avg(a):
    """Spatial mean: (B,C,H,W) -> (B,C)."""
    a = as_tensor(a)
    h, w = a.data.shape[2:]
    out = a.data.mean(axis=(2, 3))

    def backprop(g):
        return (
            (np.broadcast_to(g[:, :, None, None], a.data.shape) / (h * w)).astype(
                a.dtype, copy=True
            ),
        )

    return _from_op(out, (a,), backprop)


def grid_solve(rhs, rho, c):
    """Solve (P'P + rho*I) u = rhs where P block-averages c*c cells.

    P'P is constant 1/c^4 inside each block, so each block inverts in closed
    form (diagonal plus rank-one).  rhs is (B,1,N1,N2); rho a positive scalar
    tensor.
    """
    rhs, rho = as_tensor(rhs), as_tensor(rho, like=rhs)
    r = float(rho.data.reshape(()))
    if r <= 0:
        raise ValueError("rho must be positive")
    denom = r * (r * c**4 + c * c)

    def solve(v):
        return v / r - backend.block_sum_within(v, c) / denom

    out = solve(rhs.data)

    def backprop(g):
        grhs = solve(g)
        grho = None
        if rho.requires_grad:
            grho = np.asarray(-(grhs * out).sum(), dtype=rho.dtype).reshape(rho.data.shape)
        return grhs, grho

    return _from_op(out, (rhs, rho), backprop)
