"""Dense float64 tensors with a dynamic reverse-mode tape.

Each op that touches a tensor with ``requires_grad`` records its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the recorded graph once in reverse topological order and then releases it.

Gradient semantics:

* leaf gradients accumulate (``+=``) across separate graphs until
  ``zero_grad`` is called;
* calling ``backward`` twice on the same graph raises ``GraphError`` because
  the first call released it.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """The tape was misused (non-scalar loss, released graph)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a loss or gradient."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = ""
        self._released = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._released = False
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        from .functional import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), bw, "div")


def exp(x):
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x):
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(x, index):
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (x,), bw, "getitem")


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf that requires it, then release the graph."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already released by a previous backward call; rebuild the forward pass")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {float(loss.data)!r}")
    if not loss.requires_grad:
        loss._released = True
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                if not np.isfinite(g).all():
                    label = node.name or repr(node)
                    raise NonFiniteError(f"non-finite gradient reached leaf {label}")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._parents = ()
        node._backward = None
        node._released = True
        node.requires_grad = False
