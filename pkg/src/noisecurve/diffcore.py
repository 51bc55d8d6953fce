"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations are recorded eagerly on a :class:`Tape` as they run. Every
function in this module also accepts plain arrays; when none of the
operands is a :class:`Var` the plain numpy result is returned and nothing
is recorded, so the same model code serves inference and training.

A tape can be replayed on new leaf values with :func:`forward`, and
differentiated with :func:`backward`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape", "Var", "ShapeError", "NonScalarError", "NonFiniteError",
    "forward", "backward", "finite_difference_gradient",
    "add", "sub", "mul", "div", "neg", "square", "matmul", "affine", "relu",
    "hinge", "norm", "abs_", "sum_", "mean", "max_", "softmax_log_prob",
    "log_softmax", "softmax", "take", "concat", "reshape", "value_of",
]


class ShapeError(ValueError):
    """Operand shapes do not fit; ``node_id`` names the offending node."""

    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id


class NonScalarError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class _Node:
    __slots__ = ("op", "parents", "fn", "shape")

    def __init__(self, op, parents, fn, shape):
        self.op = op
        self.parents = parents
        self.fn = fn
        self.shape = shape


class Tape:
    """Ordered record of primitive operations.

    Node ids are insertion indices, so the record is topologically ordered
    by construction. Leaves are the differentiable inputs (parameters and
    data); constants are captured operands that never receive gradient.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []
        self._vjps: list = []
        self.leaves: list[Var] = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, name=None) -> "Var":
        arr = np.array(value, dtype=np.float64)
        var = self._push(_Node("leaf", (), None, arr.shape), arr, None)
        self.leaves.append(var)
        return var

    def const(self, value) -> "Var":
        arr = np.asarray(value, dtype=np.float64)
        return self._push(_Node("const", (), None, arr.shape), arr, None)

    def _push(self, node, value, vjp) -> "Var":
        self._nodes.append(node)
        self._values.append(value)
        self._vjps.append(vjp)
        return Var(self, len(self._nodes) - 1)

    def _record(self, op, parents: Sequence["Var"], fn):
        node_id = len(self._nodes)
        try:
            out, vjp = fn(*(self._values[p.id] for p in parents))
        except ValueError as exc:
            raise ShapeError(f"{op}: {exc}", node_id) from None
        return self._push(_Node(op, tuple(p.id for p in parents), fn, out.shape), out, vjp)

    def value(self, node_id):
        return self._values[node_id]

    def op_names(self):
        return [n.op for n in self._nodes]


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.id]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape._nodes[self.id].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


def value_of(x):
    """Underlying array of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _apply(op, fn, *operands):
    tape = None
    for o in operands:
        if isinstance(o, Var):
            if tape is None:
                tape = o.tape
            elif o.tape is not tape:
                raise ValueError(f"{op}: operands live on different tapes")
    if tape is None:
        out, _ = fn(*(np.asarray(o, dtype=np.float64) for o in operands))
        return out
    parents = [o if isinstance(o, Var) else tape.const(o) for o in operands]
    return tape._record(op, parents, fn)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------- primitives

def add(a, b):
    def fn(x, y):
        out = x + y
        return out, lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
    return _apply("add", fn, a, b)


def sub(a, b):
    def fn(x, y):
        out = x - y
        return out, lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape))
    return _apply("sub", fn, a, b)


def mul(a, b):
    def fn(x, y):
        out = x * y
        return out, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    return _apply("mul", fn, a, b)


def div(a, b):
    def fn(x, y):
        out = x / y
        return out, lambda g: (_unbroadcast(g / y, x.shape),
                               _unbroadcast(-g * x / (y * y), y.shape))
    return _apply("div", fn, a, b)


def neg(a):
    def fn(x):
        return -x, lambda g: (-g,)
    return _apply("neg", fn, a)


def square(a):
    def fn(x):
        return x * x, lambda g: (2.0 * g * x,)
    return _apply("square", fn, a)


def matmul(a, b):
    def fn(x, y):
        if x.ndim == 0 or y.ndim == 0:
            raise ValueError("matmul needs at least 1-D operands")
        out = np.matmul(x, y)

        def vjp(g):
            x2 = x[None, :] if x.ndim == 1 else x
            y2 = y[:, None] if y.ndim == 1 else y
            g2 = np.reshape(g, (x2.shape[0], y2.shape[1]))
            return (np.reshape(g2 @ y2.T, x.shape), np.reshape(x2.T @ g2, y.shape))
        return out, vjp
    return _apply("matmul", fn, a, b)


def affine(x, weight, bias):
    """Rows of ``x`` mapped through ``weight @ x + bias``; weight is (out, in)."""
    def fn(xv, w, b):
        if w.ndim != 2 or b.shape != (w.shape[0],) or xv.shape[-1:] != (w.shape[1],):
            raise ValueError(f"affine shapes x{xv.shape} W{w.shape} b{b.shape}")
        out = xv @ w.T + b

        def vjp(g):
            gx = g @ w
            if xv.ndim == 1:
                gw = np.outer(g, xv)
                gb = g
            else:
                gw = g.T @ xv
                gb = g.sum(axis=0)
            return gx, gw, gb
        return out, vjp
    return _apply("affine", fn, x, weight, bias)


def relu(a):
    """max(0, x); the subgradient at 0 is taken as 0."""
    def fn(x):
        mask = x > 0
        return np.where(mask, x, 0.0), lambda g: (g * mask,)
    return _apply("relu", fn, a)


def hinge(a):
    """[x]_+ , recorded as its own node kind."""
    def fn(x):
        mask = x > 0
        return np.where(mask, x, 0.0), lambda g: (g * mask,)
    return _apply("hinge", fn, a)


def abs_(a):
    def fn(x):
        return np.abs(x), lambda g: (g * np.sign(x),)
    return _apply("abs", fn, a)


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; gradient at the origin is 0."""
    def fn(x):
        out = np.sqrt(np.sum(x * x, axis=axis))

        def vjp(g):
            safe = np.where(out > 0, out, 1.0)
            scale = np.where(out > 0, g / safe, 0.0)
            return (np.expand_dims(scale, axis) * x,)
        return out, vjp
    return _apply("norm", fn, a)


def sum_(a, axis=None):
    def fn(x):
        out = np.sum(x, axis=axis)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
        return np.asarray(out, dtype=np.float64), vjp
    return _apply("sum", fn, a)


def mean(a, axis=None):
    def fn(x):
        count = x.size if axis is None else x.shape[axis]
        if count == 0:
            raise ValueError("mean of an empty extent")
        out = np.sum(x, axis=axis) / count

        def vjp(g):
            g = g / count
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
        return np.asarray(out, dtype=np.float64), vjp
    return _apply("mean", fn, a)


def max_(a, axis=-1):
    """Maximum along ``axis``; ties resolve to the lowest index."""
    def fn(x):
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def vjp(g):
            grad = np.zeros_like(x)
            np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return (grad,)
        return out, vjp
    return _apply("max", fn, a)


def _log_softmax(z):
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z):
    """Softmax probabilities of the last axis (plain arrays only)."""
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def log_softmax(a):
    def fn(z):
        out = _log_softmax(z)
        p = np.exp(out)
        return out, lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),)
    return _apply("log_softmax", fn, a)


def softmax_log_prob(a, labels):
    """log softmax(z)[label] per row (max-shifted log-sum-exp)."""
    labels = np.asarray(labels, dtype=np.int64)

    def fn(z):
        if z.ndim == 1:
            if labels.ndim != 0:
                raise ValueError("single logit vector needs a scalar label")
        elif labels.shape != z.shape[:1]:
            raise ValueError(f"labels {labels.shape} vs logits {z.shape}")
        if np.any(labels < 0) or np.any(labels >= z.shape[-1]):
            raise ValueError("label out of range")
        logp = _log_softmax(z)
        if z.ndim == 1:
            out = logp[labels]
        else:
            out = logp[np.arange(z.shape[0]), labels]

        def vjp(g):
            p = np.exp(logp)
            onehot = np.zeros_like(z)
            if z.ndim == 1:
                onehot[labels] = 1.0
                return ((onehot - p) * g,)
            onehot[np.arange(z.shape[0]), labels] = 1.0
            return ((onehot - p) * np.asarray(g)[:, None],)
        return np.asarray(out, dtype=np.float64), vjp
    return _apply("softmax_log_prob", fn, a)


def take(a, index):
    """Basic or integer-array indexing along the leading axes."""
    def fn(x):
        out = np.array(x[index], dtype=np.float64)

        def vjp(g):
            grad = np.zeros_like(x)
            np.add.at(grad, index, g)
            return (grad,)
        return out, vjp
    return _apply("take", fn, a)


def concat(parts, axis=0):
    parts = list(parts)

    def fn(*xs):
        out = np.concatenate(xs, axis=axis)
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return out, lambda g: tuple(np.split(g, bounds, axis=axis))
    return _apply("concat", fn, *parts)


def reshape(a, shape):
    def fn(x):
        return x.reshape(shape), lambda g: (g.reshape(x.shape),)
    return _apply("reshape", fn, a)


# -------------------------------------------------------- replay / backward

def forward(tape: Tape, inputs: Sequence) -> np.ndarray:
    """Re-run every recorded node with new leaf values.

    ``inputs`` lists one array per leaf, in creation order. Returns the
    value of the last node. Shapes must match the recorded leaves.
    """
    if len(inputs) != len(tape.leaves):
        raise ShapeError(f"expected {len(tape.leaves)} inputs, got {len(inputs)}")
    replacement = {}
    for var, value in zip(tape.leaves, inputs):
        arr = np.array(value, dtype=np.float64)
        if arr.shape != tape._nodes[var.id].shape:
            raise ShapeError(f"leaf expects shape {tape._nodes[var.id].shape}, got {arr.shape}", var.id)
        replacement[var.id] = arr
    for node_id, node in enumerate(tape._nodes):
        if node.op == "leaf":
            tape._values[node_id] = replacement[node_id]
        elif node.op != "const":
            try:
                out, vjp = node.fn(*(tape._values[p] for p in node.parents))
            except ValueError as exc:
                raise ShapeError(str(exc), node_id) from None
            tape._values[node_id] = out
            tape._vjps[node_id] = vjp
    return tape._values[-1]


class Gradients(dict):
    """Maps leaf :class:`Var` handles to gradient arrays."""

    def __getitem__(self, var):
        return super().__getitem__(var.id)

    def __contains__(self, var):
        return super().__contains__(var.id)


def backward(tape: Tape, output: Var, seed: float = 1.0) -> Gradients:
    """Gradient of a scalar node with respect to every leaf of ``tape``."""
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if output.value.size != 1:
        raise NonScalarError(f"backward needs a scalar output, got shape {output.shape}")
    adj: list = [None] * (output.id + 1)
    adj[output.id] = np.full(output.shape, float(seed))
    for node_id in range(output.id, -1, -1):
        g = adj[node_id]
        node = tape._nodes[node_id]
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, tape._vjps[node_id](g)):
            if tape._nodes[parent].op == "const":
                continue
            adj[parent] = pg if adj[parent] is None else adj[parent] + pg
    grads = Gradients()
    for var in tape.leaves:
        g = adj[var.id] if var.id < len(adj) else None
        grads[var.id] = np.zeros(var.shape) if g is None else np.asarray(g, dtype=np.float64)
    return grads


def finite_difference_gradient(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(point, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(p))
        flat[i] = orig - step
        down = float(fn(p))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (up - down) / (2.0 * step)
    return grad
