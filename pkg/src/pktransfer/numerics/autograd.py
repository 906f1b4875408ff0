"""Tape-based reverse-mode differentiation over dense float64 arrays.

Operations are recorded define-by-run: every op applied to a :class:`Tensor`
while a :class:`Tape` is active is appended to that tape, and
:func:`backward` replays the recorded graph in reverse topological order.

Only 2-D matmul is supported; vectors are carried as ``(1, n)`` rows.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import ContractError, DimensionError

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        node.op_index = len(self.nodes)
        self.nodes.append(node)

    def ops(self):
        return [node.op for node in self.nodes]


def _current_index():
    return len(_ACTIVE_TAPES[-1].nodes) if _ACTIVE_TAPES else None


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; after
    :func:`backward` their ``grad`` holds d(loss)/d(value).
    """

    __array_priority__ = 1000
    __slots__ = ("value", "grad", "requires_grad", "name", "op", "op_index",
                 "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.op_index = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, op):
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    if _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"op #{_current_index()} ({op}): cannot broadcast {a.shape} with {b.shape}"
        ) from None


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value / b.value, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"op #{_current_index()} (matmul): {a.shape} @ {b.shape}"
        )

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return _node(a.value @ b.value, (a, b), backward, "matmul")


# -- elementwise unary -------------------------------------------------------

def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.value)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def square(a):
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions / normalisations --------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), backward, "softmax")


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    y = m + np.log(s)

    def backward(g):
        return (g * e / s,)

    return _node(y, (a,), backward, "logsumexp")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(y, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- structural --------------------------------------------------------------

def transpose(a):
    a = as_tensor(a)
    return _node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index):
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), backward, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"op #{_current_index()} (concat): shapes {[t.shape for t in tensors]}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(y, tuple(tensors), backward, "concat")


# -- driver ------------------------------------------------------------------

def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Back-propagate a scalar ``loss``.

    Every leaf with ``requires_grad`` reachable from ``loss`` gets a fresh
    ``grad`` (overwritten, not accumulated across calls).  Returns a dict
    mapping each such leaf's name (or the leaf itself when unnamed) to its
    gradient.  If ``params`` is given, leaves not in it are skipped in the
    returned map and parameters that did not influence the loss get zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = []
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g
                leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if params is None:
        return {(leaf.name or leaf): leaf.grad for leaf in leaves}
    touched = {id(leaf) for leaf in leaves}
    out = {}
    for key, p in (params.items() if isinstance(params, dict) else
                   ((p.name or p, p) for p in params)):
        if id(p) not in touched:
            p.grad = np.zeros_like(p.value)
        out[key] = p.grad
    return out


def forward_eval(graph, *inputs):
    """Run ``graph(*inputs)`` on a fresh tape.

    Returns ``(output, tape)``; the tape lists the primitive ops in execution
    order and the output keeps the references needed by :func:`backward`.
    Shape errors raised inside the graph carry the offending op index.
    """
    tape = Tape()
    with tape:
        out = graph(*[as_tensor(x) for x in inputs])
    return out, tape
