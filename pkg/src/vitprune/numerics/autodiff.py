"""A minimal tape-based reverse-mode autodiff over numpy arrays.

Usage::

    w = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        loss = ops.sum(ops.mul(w, w))
    grads = backward(tape, loss)   # {w: array([2., 2., 2.])}

Every differentiable op computes its value eagerly with the kernels in
:mod:`vitprune.numerics.kernels` and, when a tape is active and any input
requires a gradient, appends a node holding its vector-Jacobian product.
"""

import contextvars

import numpy as np

from ..errors import ContractError, DimensionError
from . import kernels

_ACTIVE_TAPE = contextvars.ContextVar("vitprune_active_tape", default=None)


class Tensor:
    """An ndarray plus a ``requires_grad`` flag.

    Tensors are compared and hashed by identity so they can key gradient
    dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}{flag})"


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class GradTape:
    """Ordered record of differentiable ops executed inside its context."""

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._leaves = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, *tensors):
        """Mark tensors as leaves whose adjoints ``backward`` must report."""
        for t in tensors:
            t.requires_grad = True
            self._leaves.setdefault(id(t), t)

    def record(self, out, parents, vjp):
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self._leaves.setdefault(id(p), p)
        self._produced.add(id(out))
        self.nodes.append(_Node(out, parents, vjp))

    @property
    def leaves(self):
        return list(self._leaves.values())


def backward(tape, loss):
    """Replay ``tape`` in reverse from the scalar ``loss``.

    Returns
    -------
    dict
        Maps every leaf tensor seen by the tape to its gradient array.  Leaves
        the loss does not depend on receive zeros.

    Raises
    ------
    ContractError
        If ``loss`` is not a single-element tensor.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward needs a scalar root, got shape {loss.data.shape}")
    adj = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return {leaf: adj.get(id(leaf), np.zeros_like(leaf.data))
            for leaf in tape.leaves}


def _emit(data, parents, vjp):
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjp)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(a):
    return np.swapaxes(a, -1, -2)


# --- elementwise / structural ops -------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = kernels.check_finite(a.data + b.data, "add")
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = kernels.check_finite(a.data - b.data, "sub")
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = kernels.check_finite(a.data * b.data, "mul")
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    out = kernels.check_finite(a.data * c, "scale")
    return _emit(out, (a,), lambda g: (g * c,))


def sum(a):  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum())
    return _emit(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    out = np.asarray(a.data.mean())
    return _emit(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _emit(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    """Basic (non-fancy) indexing."""
    out = np.ascontiguousarray(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _emit(out, (a,), vjp)


def take(a, indices, axis=-1):
    """Gather ``indices`` along ``axis`` (indices must be unique)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = indices
        full[tuple(idx)] = g
        return (full,)
    return _emit(out, (a,), vjp)


def scatter(a, indices, size, axis=-1):
    """Place ``a`` at ``indices`` of a zero tensor of length ``size`` on ``axis``."""
    indices = np.asarray(indices, dtype=np.intp)
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.dtype)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = indices
    idx = tuple(idx)
    out[idx] = a.data
    return _emit(out, (a,), lambda g: (g[idx],))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)
    return _emit(out, tuple(tensors), vjp)


def expand(a, shape):
    out = np.broadcast_to(a.data, shape).copy()
    return _emit(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# --- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Differentiable :func:`kernels.matmul` (2-D or matching batch dims)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = kernels.matmul(a.data, b.data)

    def vjp(g):
        ga = kernels.matmul(g, _swap_last(b.data)) if a.requires_grad else None
        gb = kernels.matmul(_swap_last(a.data), g) if b.requires_grad else None
        return ga, gb
    return _emit(out, (a, b), vjp)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` has shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = kernels.matmul(x2, w.data)
    if b is not None:
        y = y + b.data
    out = y.reshape(*lead, w.shape[1])

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = kernels.matmul(g2, w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = kernels.matmul(x2.T, g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, vjp)


# --- nonlinearities -----------------------------------------------------------

def softmax(a):
    s = kernels.softmax_rows(a.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _emit(s, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-6):
    out, (xhat, inv_std) = kernels.layer_norm(x.data, gain.data, bias.data, eps)
    n = x.shape[-1]
    red = tuple(range(x.data.ndim - 1))

    def vjp(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _emit(out, (x, gain, bias), vjp)


def gelu(a):
    out = kernels.gelu(a.data)
    return _emit(out, (a,), lambda g: (g * kernels.gelu_grad(a.data),))


def cross_entropy(logits, labels):
    """Mean cross-entropy as a scalar tensor."""
    labels = np.asarray(labels)
    value = kernels.cross_entropy_loss(logits.data, labels)

    def vjp(g):
        p = kernels.softmax_rows(logits.data)
        p[np.arange(labels.shape[0]), labels.astype(np.intp)] -= 1.0
        return (p * (g / labels.shape[0]),)
    return _emit(np.asarray(value, dtype=logits.dtype), (logits,), vjp)
