"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every operation returns a :class:`Node` holding its value and, when any input
needs gradients, a closure computing the vector-Jacobian product for each
parent. :func:`backward` walks the recorded graph once in reverse topological
order and returns gradients for the :class:`Param` leaves by name.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri

from .errors import ContractError, DomainError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (sampling, evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("value", "parents", "backward_rule", "requires_grad", "op")

    __array_priority__ = 100  # make ndarray <op> Node dispatch to Node

    def __init__(self, value, parents: Sequence["Node"] = (),
                 backward_rule: Callable | None = None,
                 requires_grad: bool = False, op: str = "const"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __rmatmul__ = lambda self, o: matmul(o, self)  # noqa: E731
    __neg__ = lambda self: negate(self)  # noqa: E731

    @property
    def T(self) -> "Node":
        return transpose(self)


class Param(Node):
    """A trainable leaf. ``name`` is its serialization key and must be unique per model."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, op="param")
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, rule, op) -> Node:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, True, op)
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------------
# elementwise binary
# ----------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)),
                 "div")


def maximum(a, c: float) -> Node:
    """Elementwise max with a constant; gradient flows only where ``a > c``."""
    a = as_node(a)
    keep = a.value > c
    return _make(np.where(keep, a.value, c), (a,), lambda g: (g * keep,), "maximum")


# ----------------------------------------------------------------------------
# elementwise unary
# ----------------------------------------------------------------------------

def negate(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "negate")


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError(f"log: non-positive input (min {a.value.min():.3g})")
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ----------------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def rule(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb
    return _make(av @ bv, (a, b), rule, "matmul")


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected 2-D")
    return _make(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def take(a, index, axis: int = -1) -> Node:
    """Select entries along ``axis`` by an integer index array (the slice op)."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.value.ndim
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError("slice", a.shape, detail=f"index out of range on axis {axis}")
    out = np.take(a.value, index, axis=axis)

    def rule(g):
        full = np.zeros(a.shape)
        idx = [slice(None)] * a.value.ndim
        idx[axis] = index
        np.add.at(full, tuple(idx), g)
        return (full,)
    return _make(out, (a,), rule, "slice")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    axes = _norm_axis(axis, a.value.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _make(out, (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _norm_axis(axis, a.value.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    """Overflow-safe log(sum(exp(a))) along ``axis`` (max subtraction)."""
    a = as_node(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.value - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = shifted / s

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)
    return _make(out, (a,), rule, "logsumexp")


def solve_triangular(t, b, lower: bool, unit_diagonal: bool = False) -> Node:
    """Solve ``t @ x = b`` for triangular ``t``; gradients flow to ``t`` and ``b``."""
    t, b = as_node(t), as_node(b)
    if t.value.ndim != 2 or t.shape[0] != t.shape[1] or b.shape[0] != t.shape[0]:
        raise ShapeError("solve_triangular", t.shape, b.shape)
    tv = t.value
    x = _solve_tri(tv, b.value, lower=lower, unit_diagonal=unit_diagonal, check_finite=False)

    def rule(g):
        gb = _solve_tri(tv, g, lower=lower, unit_diagonal=unit_diagonal, trans="T",
                        check_finite=False)
        gt = None
        if t.requires_grad:
            gt = -gb @ x.T
            gt = np.tril(gt, -1 if unit_diagonal else 0) if lower else \
                np.triu(gt, 1 if unit_diagonal else 0)
        return gt, gb
    return _make(x, (t, b), rule, "solve_triangular")


_OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul, "exp": exp,
    "log": log, "tanh": tanh, "negate": negate, "sum": sum, "mean": mean,
    "broadcast": broadcast_to, "slice": take, "concat": lambda *xs, **kw: concat(xs, **kw),
    "logsumexp": logsumexp, "maximum": maximum, "transpose": transpose, "reshape": reshape,
    "solve_triangular": solve_triangular,
}


def op_apply(kind: str, *inputs, **kwargs) -> Node:
    """Apply a primitive by name, e.g. ``op_apply("matmul", a, b)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------

def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, params: Iterable[Param] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every reachable Param.

    When ``params`` is given, the result has exactly those keys and any Param
    the loss does not depend on gets an all-zero gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[str, np.ndarray] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(_topological(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Param):
                if node.name in grads:
                    raise ContractError(f"duplicate Param name {node.name!r} in graph")
                grads[node.name] = np.array(g, dtype=np.float64).reshape(node.shape)
                continue
            contribs = node.backward_rule(g)
            for parent, c in zip(node.parents, contribs):
                if c is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + c
                else:
                    pending[key] = np.asarray(c, dtype=np.float64)
    if params is None:
        return grads
    out = {}
    for p in params:
        g = grads.get(p.name)
        out[p.name] = np.zeros_like(p.value) if g is None else np.array(g).reshape(p.shape)
    return out


def finite_diff_gradient(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; the test oracle for :func:`backward`."""
    if h <= 0:
        raise ContractError("finite_diff_gradient: h must be positive")
    x = np.array(at, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"finite_diff_gradient: non-finite f at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
