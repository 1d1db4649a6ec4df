"""Minimal dense-tensor math with reverse-mode differentiation.

Tensors wrap flat numpy storage. Every primitive records itself on a
module-level graph (tape) when gradients are enabled and any input requires
them; `backward` walks the tape once in reverse and deposits gradients on the
leaves. Training runs in float32, verification in float64 (see `precision`).
"""

import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.graph = []
    return _state


def current_dtype():
    return _st().dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    st = _st()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_st().dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def _record(out, inputs, vjp):
    st = _st()
    if st.grad_enabled and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        st.graph.append(_Node(out, inputs, vjp))
    return out


def graph_size():
    return len(_st().graph)


def clear_graph():
    _st().graph.clear()


def backward(loss):
    """Accumulate gradients of a scalar loss onto all requires_grad leaves.

    The tape is consumed: after this call the graph is empty.
    """
    st = _st()
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not st.graph:
        raise RuntimeError("backward called with an empty graph")
    pending = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in st.graph}
    leaves = {}
    for node in reversed(st.graph):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if id(inp) in produced:
                if id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi
            elif inp.requires_grad:
                if id(inp) in leaves:
                    leaves[id(inp)] = (inp, leaves[id(inp)][1] + gi)
                else:
                    leaves[id(inp)] = (inp, gi)
    for t, g in leaves.values():
        t.grad = g if t.grad is None else t.grad + g
    st.graph.clear()


def _unbroadcast(g, shape):
    # sum out broadcast axes so the gradient matches the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast")


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scalar_mul(a, s):
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {list(a.shape)} @ {list(b.shape)}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if a.ndim > 1 else a.data * g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.ndim == 1:
            gb = np.multiply.outer(a.data, g)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def transpose(a, axes=None):
    out = Tensor(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_axes(a, ax1, ax2):
    out = Tensor(np.swapaxes(a.data, ax1, ax2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, idx, axis=0):
    """Index-select rows along an axis; gradient scatters (duplicates accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(np.take(a.data, idx, axis=axis))

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record(out, (a,), vjp)


def row_softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    s = np.exp(z - lse)
    return _record(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(a, eps=1e-6):
    """Parameter-free normalization over the last axis (mean 0, variance 1)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(xhat)

    def vjp(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(out, (a,), vjp)


_GELU_K = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    x = a.data
    inner = _GELU_K * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _record(out, (a,), vjp)


def max_reduce(a, axis):
    x = a.data
    out = Tensor(x.max(axis=axis))
    arg = np.expand_dims(x.argmax(axis=axis), axis)

    def vjp(g):
        ga = np.zeros_like(x)
        np.put_along_axis(ga, arg, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record(out, (a,), vjp)


def sum_reduce(a, axis=None):
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean_reduce(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record(out, (a,), vjp)


def square(a):
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * g * a.data,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def smooth_l1(x, y, beta=1.0):
    """Mean smooth-l1: 0.5*d^2/beta where |d| < beta, |d| - 0.5*beta elsewhere."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"smooth_l1: shapes differ, {list(x.shape)} vs {list(y.shape)}")
    d = x.data - y.data
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = Tensor(vals.mean())
    n = d.size

    def vjp(g):
        gd = np.where(quad, d / beta, np.sign(d)) * (g / n)
        return gd, -gd

    return _record(out, (x, y), vjp)


def dropout(a, rate, rng):
    """Inverted dropout with caller-supplied rng. rate=0 is the identity."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


def gradcheck(fn, tensors, h=1e-5, rtol=1e-4):
    """Central finite-difference check of fn (scalar output) w.r.t. tensors.

    Run under precision('float64'). Returns the max relative error seen.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "leaf received no gradient"
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn().item()
            clear_graph()
            flat[i] = orig - h
            lm = fn().item()
            clear_graph()
            flat[i] = orig
            nflat[i] = (lp - lm) / (2 * h)
        denom = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-8)
        err = np.abs(num - t.grad).max() / denom
        worst = max(worst, err)
        assert err < rtol, f"finite-difference mismatch: rel err {err:.3e}"
        t.grad = None
    return worst
