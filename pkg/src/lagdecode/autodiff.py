"""Minimal reverse-mode differentiation over dense float64 arrays.

Graphs are built eagerly: every primitive call computes its value on
construction.  ``evaluate`` re-runs the forward pass over an existing graph
(so leaf values can be changed in place), and ``backward`` accumulates
adjoints in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

COSINE_EPS = 1e-12


class GraphError(RuntimeError):
    pass


class NonFiniteError(GraphError):
    """Raised when a primitive produces NaN or Inf from finite inputs."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive '{primitive}'")
        self.primitive = primitive


class Node:
    __slots__ = ("value", "parents", "prim", "grad", "name")

    def __init__(self, value, parents=(), prim=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.prim = prim
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.prim is None

    def __repr__(self):
        label = self.prim.name if self.prim else (self.name or "leaf")
        return f"Node({label}, shape={self.shape})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Primitive:
    """Forward function plus vector-Jacobian product.

    ``vjp(g, out, *inputs)`` returns one adjoint per input (or ``None`` for
    inputs that receive nothing).
    """

    def __init__(self, name: str, forward: Callable, vjp: Callable, **params):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        self.params = params

    def __call__(self, *args):
        parents = [as_node(a) for a in args]
        value = self.forward(*[p.value for p in parents], **self.params)
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(self.name)
        return Node(value, parents, self)


def leaf(value, name=None) -> Node:
    return Node(np.array(value, dtype=np.float64, copy=True), name=name)


def constant(value) -> Node:
    return Node(value, name="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _row_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _row_log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _prim(name, forward, vjp):
    return Primitive(name, forward, vjp)


# --- elementwise and linear algebra -------------------------------------

_add = _prim("add", lambda a, b: a + b,
             lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_sub = _prim("sub", lambda a, b: a - b,
             lambda g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))
_mul = _prim("mul", lambda a, b: a * b,
             lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
_neg = _prim("neg", lambda a: -a, lambda g, out, a: (-g,))


def _matmul_vjp(g, out, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


_matmul = _prim("matmul", lambda a, b: a @ b, _matmul_vjp)
_transpose = _prim("transpose", lambda a: a.T, lambda g, out, a: (g.T,))
_exp = _prim("exp", np.exp, lambda g, out, a: (g * out,))
_log = _prim("log", np.log, lambda g, out, a: (g / a,))
_tanh = _prim("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
_sum = _prim("sum", lambda a: np.sum(a), lambda g, out, a: (np.broadcast_to(g, a.shape).copy(),))
_mean_rows = _prim("mean_rows", lambda a: a.mean(axis=0),
                   lambda g, out, a: (np.broadcast_to(g / a.shape[0], a.shape).copy(),))
_stop_gradient = _prim("stop_gradient", lambda a: a.copy(), lambda g, out, a: (None,))


def _softmax_vjp(g, out, z):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_vjp(g, out, z):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


_softmax = _prim("softmax", _row_softmax, _softmax_vjp)
_log_softmax = _prim("log_softmax", _row_log_softmax, _log_softmax_vjp)


def _cosine_fwd(a, b):
    na = np.sqrt(a @ a) + COSINE_EPS
    nb = np.sqrt(b @ b) + COSINE_EPS
    return (a @ b) / (na * nb)


def _cosine_vjp(g, out, a, b):
    ra = np.sqrt(a @ a)
    rb = np.sqrt(b @ b)
    na, nb = ra + COSINE_EPS, rb + COSINE_EPS
    dot = a @ b
    # d/da [dot / (na nb)] = b/(na nb) - dot/(na^2 nb) * a/ra
    ua = a / ra if ra > 0 else np.zeros_like(a)
    ub = b / rb if rb > 0 else np.zeros_like(b)
    da = b / (na * nb) - dot / (na * na * nb) * ua
    db = a / (na * nb) - dot / (na * nb * nb) * ub
    return g * da, g * db


_cosine = _prim("cosine", _cosine_fwd, _cosine_vjp)


def _ce_fwd(logits, target):
    return -np.sum(target * _row_log_softmax(logits))


def _ce_vjp(g, out, logits, target):
    logp = _row_log_softmax(logits)
    p = np.exp(logp)
    d_logits = p * target.sum(axis=-1, keepdims=True) - target
    return g * d_logits, -g * logp


_cross_entropy = _prim("cross_entropy", _ce_fwd, _ce_vjp)


def _normalize_rows_fwd(a):
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    return a / np.maximum(n, COSINE_EPS)


def _normalize_rows_vjp(g, out, a):
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    big = n >= COSINE_EPS
    nn = np.maximum(n, COSINE_EPS)
    proj = (g * out).sum(axis=-1, keepdims=True)
    da = np.where(big, (g - out * proj) / nn, g / COSINE_EPS)
    return (da,)


_normalize_rows = _prim("normalize_rows", _normalize_rows_fwd, _normalize_rows_vjp)


def add(a, b) -> Node:
    return _add(a, b)


def sub(a, b) -> Node:
    return _sub(a, b)


def mul(a, b) -> Node:
    """Elementwise product with numpy broadcasting."""
    return _mul(a, b)


def neg(a) -> Node:
    return _neg(a)


def matmul(a, b) -> Node:
    return _matmul(a, b)


def transpose(a) -> Node:
    return _transpose(a)


def exp(a) -> Node:
    return _exp(a)


def log(a) -> Node:
    return _log(a)


def tanh(a) -> Node:
    return _tanh(a)


def sum(a) -> Node:  # noqa: A001 - mirrors numpy naming
    return _sum(a)


def mean_rows(a) -> Node:
    """Average over the leading axis (mean-pooling of a sequence of rows)."""
    return _mean_rows(a)


def softmax(a) -> Node:
    return _softmax(a)


def log_softmax(a) -> Node:
    return _log_softmax(a)


def cosine(a, b) -> Node:
    """Cosine similarity of two vectors; norms are padded by ``COSINE_EPS``."""
    return _cosine(a, b)


def cross_entropy(logits, target) -> Node:
    """Summed cross-entropy ``-sum(target * log_softmax(logits))`` over rows.

    ``target`` is a distribution (or stack of distributions) and is itself
    differentiable, which the relaxed decoder relies on.
    """
    return _cross_entropy(logits, target)


def normalize_rows(a) -> Node:
    return _normalize_rows(a)


def stop_gradient(a) -> Node:
    """Identity on the forward pass; blocks all adjoint flow."""
    return _stop_gradient(a)


def take_rows(a, start: int, stop: int) -> Node:
    prim = Primitive(
        "take_rows",
        lambda x, start, stop: x[start:stop],
        lambda g, out, x, start, stop: (_scatter_rows(g, x.shape, start, stop),),
        start=start, stop=stop,
    )
    return prim(a)


def _scatter_rows(g, shape, start, stop):
    full = np.zeros(shape)
    full[start:stop] = g
    return full


def concat_rows(a, b) -> Node:
    prim = Primitive(
        "concat_rows",
        lambda x, y: np.concatenate([x, y], axis=0),
        lambda g, out, x, y: (g[: x.shape[0]], g[x.shape[0]:]),
    )
    return prim(a, b)


# --- graph traversal ------------------------------------------------------

def topological_order(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def evaluate(root: Node) -> Node:
    """Recompute every non-leaf value from the current leaf values."""
    for node in topological_order(root):
        if node.prim is None:
            continue
        vals = [p.value for p in node.parents]
        value = np.asarray(node.prim.forward(*vals, **node.prim.params), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(node.prim.name)
        node.value = value
        node.grad = None
    return root


def eval_scalar(root: Node) -> float:
    if root.value.size != 1 or root.value.ndim > 1:
        raise GraphError(f"root must be scalar, got shape {root.shape}")
    evaluate(root)
    return float(root.value)


def backward(root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Adjoints of a scalar ``root`` with respect to each node in ``wrt``.

    Adjoints are recomputed from scratch on every call, so repeated calls
    return identical arrays.
    """
    if root.value.size != 1:
        raise GraphError(f"root must be scalar, got shape {root.shape}")
    order = topological_order(root)
    members = {id(n) for n in order}
    for n in wrt:
        if id(n) not in members:
            raise GraphError(f"{n!r} is not part of the graph")
    for n in order:
        n.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.prim is None or node.grad is None:
            continue
        vals = [p.value for p in node.parents]
        adjoints = node.prim.vjp(node.grad, node.value, *vals, **node.prim.params)
        for parent, adj in zip(node.parents, adjoints):
            if adj is None:
                continue
            adj = np.asarray(adj, dtype=np.float64).reshape(parent.shape)
            parent.grad = adj.copy() if parent.grad is None else parent.grad + adj
    return [np.zeros_like(n.value) if n.grad is None else n.grad.copy() for n in wrt]


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn(x))
        flat[i] = orig - h
        fm = float(loss_fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` in the Euclidean norm."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
