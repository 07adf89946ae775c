"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only list of :class:`Node` objects.  Every op
appends its output node after its parents, so walking the list backwards is
a valid reverse topological order.  Shapes are never broadcast implicitly;
use :func:`broadcast_rows` or :func:`scale` to align operands.
"""

from __future__ import annotations

import functools
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.special


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr


class Node:
    """One value on the tape.  ``vjp`` maps the output cotangent to parent cotangents."""

    __slots__ = ("graph", "index", "value", "parents", "vjp", "kind", "trainable", "name")

    def __init__(self, graph, value, parents=(), vjp=None, kind="leaf", trainable=False, name=None):
        self.graph = graph
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.kind = kind
        self.trainable = trainable
        self.name = name
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[int, Node] = {}

    def constant(self, value, name=None) -> Node:
        return Node(self, _as_array(value), name=name)

    def leaf(self, value, name=None) -> Node:
        """A trainable leaf that does not alias any external array."""
        return Node(self, _as_array(value), trainable=True, name=name)

    def param(self, array: np.ndarray, name: str | None = None) -> Node:
        """Trainable leaf bound to ``array``; repeated calls return the same node."""
        key = id(array)
        node = self._params.get(key)
        if node is None:
            node = Node(self, array, trainable=True, name=name)
            self._params[key] = node
        return node

    def backward(self, loss: Node) -> dict[Node, np.ndarray]:
        """Gradients of a scalar ``loss`` for every trainable leaf on this graph.

        Leaves the loss does not depend on get zero gradients.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {}
        for node in self.nodes:
            if node.trainable:
                g = grads[node.index]
                out[node] = np.zeros_like(node.value) if g is None else g
        return out


def lift(x, graph: "Graph | None" = None) -> Node:
    """Return ``x`` if it is already a node, else a constant on ``graph`` (or a fresh one)."""
    if isinstance(x, Node):
        return x
    return (graph or Graph()).constant(x)


def _lifts(n_args: int):
    """Wrap the first ``n_args`` positional arguments into nodes on a shared graph."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            head = args[:n_args]
            graph = next((a.graph for a in head if isinstance(a, Node)), None) or Graph()
            return fn(*(lift(a, graph) for a in head), *args[n_args:], **kwargs)

        return wrapper

    return deco


def _emit(parents: Sequence[Node], value: np.ndarray, vjp: Callable, kind: str) -> Node:
    graph = parents[0].graph
    for p in parents[1:]:
        if p.graph is not graph:
            raise ValueError(f"{kind}: operands live on different graphs")
    return Node(graph, value, parents, vjp, kind)


def _same_shape(kind: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


@_lifts(2)
def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _emit((a, b), a.value + b.value, lambda g: (g, g), "add")


@_lifts(2)
def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _emit((a, b), a.value - b.value, lambda g: (g, -g), "sub")


@_lifts(2)
def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit((a, b), av * bv, lambda g: (g * bv, g * av), "mul")


@_lifts(1)
def negate(a: Node) -> Node:
    return _emit((a,), -a.value, lambda g: (-g,), "negate")


@_lifts(1)
def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _emit((a,), c * a.value, lambda g: (c * g,), "scale")


@_lifts(1)
def square(a: Node) -> Node:
    av = a.value
    return _emit((a,), av * av, lambda g: (2.0 * av * g,), "square")


@_lifts(1)
def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _emit((a,), out, lambda g: (g * out,), "exp")


@_lifts(1)
def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0):
        raise NonFiniteError("log of a non-positive entry")
    return _emit((a,), np.log(av), lambda g: (g / av,), "log")


@_lifts(1)
def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _emit((a,), out, lambda g: (g * (1.0 - out * out),), "tanh")


@_lifts(1)
def sigmoid(a: Node) -> Node:
    out = scipy.special.expit(a.value)
    return _emit((a,), out, lambda g: (g * out * (1.0 - out),), "sigmoid")


@_lifts(1)
def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)
    return _emit((a,), a.value * mask, lambda g: (g * mask,), "relu")


@_lifts(1)
def elu(a: Node) -> Node:
    av = a.value
    neg = av <= 0
    em1 = np.expm1(np.minimum(av, 0.0))
    out = np.where(neg, em1, av)
    dout = np.where(neg, em1 + 1.0, 1.0)
    return _emit((a,), out, lambda g: (g * dout,), "elu")


@_lifts(1)
def cos(a: Node) -> Node:
    av = a.value
    return _emit((a,), np.cos(av), lambda g: (-g * np.sin(av),), "cos")


@_lifts(1)
def abs_(a: Node) -> Node:
    sign = np.sign(a.value)
    return _emit((a,), np.abs(a.value), lambda g: (g * sign,), "abs")


# ---------------------------------------------------------------- structural


@_lifts(2)
def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _emit((a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g), "matmul")


@_lifts(1)
def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _emit((a,), a.value.T.copy(), lambda g: (g.T,), "transpose")


@_lifts(1)
def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _emit((a,), out, lambda g: (g.reshape(old),), "reshape")


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ShapeError("concat of nothing")
    graph = next((n.graph for n in nodes if isinstance(n, Node)), None) or Graph()
    nodes = [lift(n, graph) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[n.shape for n in nodes]}") from exc
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _emit(tuple(nodes), out, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


@_lifts(1)
def slice_(a: Node, index) -> Node:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(0, 2), slice(None)))``."""
    shape = a.shape
    out = a.value[index]
    if np.ndim(out) == 0:
        out = np.reshape(out, (1,))

    def vjp(g):
        full = np.zeros(shape)
        full[index] = np.reshape(g, full[index].shape)
        return (full,)

    return _emit((a,), np.array(out), vjp, "slice")


@_lifts(1)
def take_rows(a: Node, rows: Sequence[int]) -> Node:
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _emit((a,), a.value[rows], vjp, "take_rows")


@_lifts(1)
def broadcast_rows(v: Node, n: int) -> Node:
    """Tile a width-d vector (shape ``(d,)`` or ``(1, d)``) into an n x d matrix."""
    shape = v.shape
    if not (len(shape) == 1 or (len(shape) == 2 and shape[0] == 1)):
        raise ShapeError(f"broadcast_rows needs a vector or a single row, got {shape}")
    row = v.value.reshape(-1)
    return _emit((v,), np.tile(row, (n, 1)), lambda g: (g.sum(axis=0).reshape(shape),), "broadcast_rows")


@_lifts(1)
def sum_(a: Node, axis: int | None = None) -> Node:
    shape = a.shape
    if axis is None:
        out = np.array([a.value.sum()])
        return _emit((a,), out, lambda g: (np.full(shape, g.item()),), "sum")
    out = a.value.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit((a,), out, vjp, "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


@_lifts(1)
def softmax_rows(a: Node) -> Node:
    av = np.atleast_2d(a.value)
    z = av - av.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    shape = a.shape

    def vjp(g):
        g2 = np.atleast_2d(g)
        return ((s * (g2 - (g2 * s).sum(axis=1, keepdims=True))).reshape(shape),)

    return _emit((a,), s.reshape(shape), vjp, "softmax_rows")


@_lifts(1)
def log_softmax_rows(a: Node) -> Node:
    av = np.atleast_2d(a.value)
    z = av - av.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    shape = a.shape

    def vjp(g):
        g2 = np.atleast_2d(g)
        return ((g2 - s * g2.sum(axis=1, keepdims=True)).reshape(shape),)

    return _emit((a,), out.reshape(shape), vjp, "log_softmax_rows")


@_lifts(2)
def spd_solve(a: Node, b: Node) -> Node:
    """X = A^{-1} B for symmetric positive-definite A via Cholesky.

    Raises ``numpy.linalg.LinAlgError`` when A is not positive definite.
    """
    if a.value.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise ShapeError(f"spd_solve: shape mismatch {a.shape} vs {b.shape}")
    factor = scipy.linalg.cho_factor(a.value, lower=True, check_finite=True)
    x = scipy.linalg.cho_solve(factor, b.value)

    def vjp(g):
        gb = scipy.linalg.cho_solve(factor, g)
        x2 = x.reshape(x.shape[0], -1)
        gb2 = gb.reshape(gb.shape[0], -1)
        return (-gb2 @ x2.T, gb)

    return _emit((a, b), x, vjp, "spd_solve")


OPS: dict[str, Callable[..., Node]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "elu": elu,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "exp": exp,
    "log": log,
    "square": square,
    "negate": negate,
    "scale": scale,
    "cos": cos,
    "abs": abs_,
    "transpose": transpose,
    "reshape": reshape,
    "take_rows": take_rows,
    "broadcast_rows": broadcast_rows,
    "spd_solve": spd_solve,
}


def forward_op(kind: str, *inputs, **kwargs) -> Node:
    """Dispatch by op name; ``concat`` takes a single sequence argument."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(f(x)).reshape(-1)[0])
        flat[i] = orig - h
        fm = float(np.asarray(f(x)).reshape(-1)[0])
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
