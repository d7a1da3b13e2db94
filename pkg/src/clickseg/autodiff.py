"""Minimal reverse-mode autodiff over numpy arrays.

Just enough ops for the segmentation model: dense matmul (2D and batched),
broadcasting arithmetic, relu/sigmoid/log, softmax, layer norm, row gather /
segment mean (voxel pooling), reshape/transpose/concat, clamp and axis
reductions. Gradients are plain numpy arrays accumulated functionally (never
mutated in place), so aliasing between nodes is safe.

Graph recording is controlled per-thread: wrap inference in ``no_grad()`` to
skip building the tape.
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self, seed=None):
        """Backpropagate from this tensor; seed defaults to ones."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._backward is not None or p.requires_grad:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward):
    """Create an op output; records the tape only when grads are wanted."""
    if _grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def _accum(t: Tensor, g):
    if not (t.requires_grad or t._backward is not None):
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), bwd)


def scale(a, s: float):
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g * s)

    return _result(a.data * s, (a,), bwd)


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    """np.matmul semantics for 2D or batched 3D operands."""
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _result(np.matmul(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    src_shape = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(src_shape))

    return _result(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), bwd)


def concat(a, b, axis=1):
    a, b = _as_tensor(a), _as_tensor(b)
    split = a.data.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    return _result(np.concatenate([a.data, b.data], axis=axis), (a, b), bwd)


def gather_rows(a, idx):
    """out[i] = a[idx[i]] for a 2D tensor; backward is a row scatter-add."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = a.data.shape[0]

    def bwd(g):
        acc = np.zeros((n_rows, a.data.shape[1]), dtype=g.dtype)
        kernels.scatter_add_rows(acc, idx, np.ascontiguousarray(g))
        _accum(a, acc)

    return _result(a.data[idx], (a,), bwd)


def segment_mean(a, seg_ids, n_segments):
    """Mean of rows of `a` grouped by seg_ids; every segment must be nonempty."""
    a = _as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    counts = np.bincount(seg_ids, minlength=n_segments).astype(a.data.dtype)
    sums = np.zeros((n_segments, a.data.shape[1]), dtype=a.data.dtype)
    kernels.scatter_add_rows(sums, seg_ids, np.ascontiguousarray(a.data))
    out = sums / counts[:, None]

    def bwd(g):
        _accum(a, (g / counts[:, None])[seg_ids])

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    t = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return _result(y, (a,), bwd)


def log(a):
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def clamp(a, lo, hi):
    """Clip values; gradient passes only where lo < a < hi."""
    a = _as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _accum(a, g * mask)

    return _result(np.clip(a.data, lo, hi), (a,), bwd)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _result(y, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.data.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        _accum(a, (gg - m1 - xhat * m2) * inv)

    del d
    return _result(out, (a, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape).astype(g.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, shape).astype(g.dtype))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, shape).astype(g.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, shape).astype(g.dtype))

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def linear(x, w, b):
    """x @ w + b."""
    return add(matmul(x, w), b)
