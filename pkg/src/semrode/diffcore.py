"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the classifier and the distance regularizers
are provided. Broadcasting is limited to scalar constants and row-vector
bias addition so every backward rule stays easy to audit.

Gradients accumulate (``+=``) across calls to :func:`backward`; call
:func:`zero_grads` between optimisation steps.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    """A value in the computation graph.

    ``parents`` holds the input nodes and ``_backward`` maps the upstream
    gradient to one gradient per parent (``None`` for parents that do not
    need one).
    """

    __slots__ = ("value", "requires_grad", "grad", "parents", "_backward", "op")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Node", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite value produced by {op}")
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr)
        self.parents = parents
        self._backward = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(value, requires_grad: bool = False) -> Node:
    return Node(value, requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: tuple[Node, ...], backward_fn: BackwardFn, op: str) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs, parents=parents if needs else (),
                backward_fn=backward_fn if needs else None, op=op)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward, "matmul")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return _make(a.value.T.copy(), (a,), backward, "transpose")


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    if int(np.prod(shape)) != a.value.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.value.reshape(shape).copy(), (a,), backward, "reshape")


# ---------------------------------------------------------------- elementwise

def _check_binary(a: Node, b: Node, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Node:
    """Elementwise sum.

    ``b`` may also be a python scalar, or a row vector of length
    ``a.shape[-1]`` added to every row of a matrix ``a`` (bias addition).
    """
    if isinstance(b, (int, float)):
        c = float(b)
        return _make(a.value + c, (a,), lambda g: (g,), "add_scalar")
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    _check_binary(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Node:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    a, b = _as_node(a), _as_node(b)
    _check_binary(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_binary(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive value")
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a: Node) -> Node:
    """Square root; the gradient at exactly zero is taken as zero."""
    if np.any(a.value < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.value)
    safe = np.where(out > 0, out, 1.0)
    deriv = np.where(out > 0, 0.5 / safe, 0.0)
    return _make(out, (a,), lambda g: (g * deriv,), "sqrt")


# ---------------------------------------------------------------- reductions

def _check_axis(a: Node, axis: int | None) -> None:
    if axis is not None and not (0 <= axis < a.value.ndim):
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError(f"cannot reduce over an empty axis (shape {a.shape})")


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    _check_axis(a, axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), backward, "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    _check_axis(a, axis)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def logsumexp(a: Node, axis: int) -> Node:
    """Stabilised log-sum-exp of a matrix along ``axis``."""
    _check_axis(a, axis)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + m).squeeze(axis)
    weights = shifted / total

    def backward(g):
        return (weights * np.expand_dims(g, axis),)

    return _make(out, (a,), backward, "logsumexp")


def sq_dist(a: Node, b: Node) -> Node:
    """Pairwise squared euclidean distances between the rows of two matrices."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"sq_dist shape mismatch: {a.shape} vs {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        w = 2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return _make(out, (a, b), backward, "sq_dist")


# ---------------------------------------------------------------- losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Node, labels: Sequence[int]) -> Node:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.value.ndim != 2:
        raise DimensionError(f"logits must be b x c, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if b < 1 or labels.shape != (b,):
        raise DimensionError(f"need one label per row: {b} rows, {labels.shape} labels")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DomainError(f"label out of range [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        return (d * (float(g) / b),)

    return _make(loss, (logits,), backward, "softmax_ce")


# ---------------------------------------------------------------- backward pass

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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node that requires it."""
    if root.value.ndim != 0 and root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = np.array(pg, dtype=np.float64)


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)
