"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive in execution order together with
its forward function, so the recorded graph can be replayed and
differentiated. Leaves are either constants or named parameters; only the
latter are reported by :meth:`Tape.backward`.
"""
import numpy as np

from . import kernels
from .tensor import mode_product as _mode_product


class Var:
    __slots__ = ("value", "tape", "parents", "fn", "vjp", "name", "requires_grad", "index")

    def __init__(self, value, tape, parents=(), fn=None, vjp=None, name=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.fn = fn
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


class Tape:
    def __init__(self):
        self.nodes = []
        self.params = {}

    def const(self, value):
        if isinstance(value, Var):
            return value
        return Var(np.asarray(value, dtype=np.float64), self)

    def param(self, name, value):
        if name in self.params:
            return self.params[name]
        node = Var(np.asarray(value), self, name=name, requires_grad=True)
        self.params[name] = node
        return node

    def replay(self):
        """Recompute every non-leaf value from the current leaf values."""
        values = []
        for node in self.nodes:
            if node.fn is None:
                values.append(node.value)
            else:
                values.append(node.fn(*(values[p.index] for p in node.parents)))
        return values

    def backward(self, loss):
        """Gradients of scalar ``loss`` for every parameter on this tape."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise RuntimeError("loss node was not recorded on this tape")
        if loss.value.size != 1:
            raise RuntimeError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None) if node.name is None else grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            parent_grads = node.vjp(g, needs, node.value, *(p.value for p in node.parents))
            for parent, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return {
            name: grads.get(node.index, np.zeros_like(node.value))
            for name, node in self.params.items()
        }


def _record(fn, vjp, *parents):
    tape = next((p.tape for p in parents if isinstance(p, Var)), None)
    if tape is None:
        raise TypeError("at least one operand must be a recorded Var")
    parents = tuple(tape.const(p) for p in parents)
    value = fn(*(p.value for p in parents))
    needs = any(p.requires_grad for p in parents)
    return Var(value, tape, parents, fn, vjp, requires_grad=needs)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    return _record(
        np.add,
        lambda g, needs, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a, b,
    )


def sub(a, b):
    return _record(
        np.subtract,
        lambda g, needs, out, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)),
        a, b,
    )


def mul(a, b):
    return _record(
        np.multiply,
        lambda g, needs, out, x, y: (
            _unbroadcast(g * y, x.shape) if needs[0] else None,
            _unbroadcast(g * x, y.shape) if needs[1] else None,
        ),
        a, b,
    )


def _matmul_vjp(g, needs, out, x, y):
    gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if needs[0] else None
    gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if needs[1] else None
    return gx, gy


def matmul(a, b):
    return _record(np.matmul, _matmul_vjp, a, b)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reduce_sum(a, axis=None, keepdims=False):
    def fn(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g, needs, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(fn, vjp, a)


def mean(a):
    return mul(reduce_sum(a), 1.0 / a.value.size)


def reshape(a, shape):
    return _record(
        lambda x: x.reshape(shape),
        lambda g, needs, out, x: (g.reshape(x.shape),),
        a,
    )


def transpose(a, axes):
    inverse = np.argsort(axes)
    return _record(
        lambda x: np.transpose(x, axes),
        lambda g, needs, out, x: (np.transpose(g, inverse),),
        a,
    )


def gather(a, index):
    """``a[index]`` along the first axis; ``index`` may have any shape."""
    index = np.asarray(index)

    def vjp(g, needs, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(lambda x: x[index], vjp, a)


def concat(items, axis=-1):
    items = list(items)
    sizes = [np.shape(item.value if isinstance(item, Var) else item)[axis] for item in items]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, needs, out, *xs):
        return tuple(np.split(g, splits, axis=axis))

    return _record(lambda *xs: np.concatenate(xs, axis=axis), vjp, *items)


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    def vjp(g, needs, s, x):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _record(lambda x: _softmax(x, axis), vjp, a)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return _record(_sigmoid, lambda g, needs, s, x: (g * s * (1.0 - s),), a)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def _gelu_vjp(g, needs, out, x):
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)


def gelu(a):
    """Tanh-approximated GELU."""
    return _record(_gelu, _gelu_vjp, a)


def layer_norm(a, eps=1e-5):
    """Normalize over the last axis (no affine part)."""

    def fn(x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps)

    def vjp(g, needs, y, x):
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _record(fn, vjp, a)


def dwconv3d(x, w):
    """Depthwise 3x3x3 convolution with zero padding; ``x`` is (C, T, H, W)."""

    def vjp(g, needs, out, xv, wv):
        gx, gw = kernels.dwconv3d_backward(xv, wv, g)
        return gx, gw

    return _record(kernels.dwconv3d_forward, vjp, x, w)


def mode_product(x, a, mode):
    """``x ×_mode a`` where either operand may carry gradients."""
    axis = mode - 1

    def vjp(g, needs, out, xv, av):
        gx = _mode_product(g, av.T, mode) if needs[0] else None
        ga = None
        if needs[1]:
            ga = np.tensordot(g, xv, axes=([i for i in range(4) if i != axis],) * 2)
        return gx, ga

    return _record(lambda xv, av: _mode_product(xv, av, mode), vjp, x, a)


def mse(pred, target):
    """Mean squared error against a constant or recorded target."""

    def fn(p, t):
        return np.asarray(np.mean((p - t) ** 2))

    def vjp(g, needs, out, p, t):
        d = (2.0 / p.size) * (p - t) * g
        return d, -d

    return _record(fn, vjp, pred, target)
