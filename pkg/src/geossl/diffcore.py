"""Eager reverse-mode autodiff over dense float64 arrays.

Every op executes immediately and records a backward rule on the result node.
``backward(root)`` walks the recorded graph once in reverse topological order
and returns the adjoint of every leaf that requires a gradient.

>>> x = leaf(np.array(3.0))
>>> y = square(x)
>>> backward(y)[x]
array(6.)
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "NonFiniteError", "leaf", "constant", "backward", "grad_check",
    "debug_checks", "custom_op", "stop_gradient",
    "add", "sub", "neg", "mul", "scale", "matmul", "exp", "log", "square",
    "relu", "logsumexp", "sum", "mean", "l2_normalize_rows", "similarity",
    "concat", "offdiag", "rowdot", "reshape",
]

_DEBUG = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def debug_checks(enabled: bool):
    """Toggle the per-op NaN/Inf check (on by default)."""
    global _DEBUG
    old, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = old


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "name", "__weakref__")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

    # operator sugar; all route through the functional ops below
    def __add__(self, other):
        return add(self, _as_node(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_node(other))


def leaf(value, requires_grad=True, name=None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: Sequence[Node], vjp, opname: str) -> Node:
    if _DEBUG and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite result in {opname}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value)
    return Node(value, parents, vjp, requires_grad=True, name=opname)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, opname: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    # only trailing-row broadcast (e.g. bias vectors) and scalars are supported
    if sb == () or sa == () or (len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb) \
            or (len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa):
        return
    raise ValueError(f"{opname}: shape mismatch {sa} vs {sb}")


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
                 "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def relu(a: Node) -> Node:
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,), "relu")


def _expand(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def logsumexp(a: Node, axis: int = -1) -> Node:
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = shifted / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    shape = a.shape
    return _make(a.value.sum(axis=axis), (a,), lambda g: (_expand(g, shape, axis).copy(),), "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    shape = a.shape
    n = a.value.size if axis is None else shape[axis]
    return _make(a.value.mean(axis=axis), (a,),
                 lambda g: (_expand(g, shape, axis) / n,), "mean")


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def l2_normalize_rows(a: Node) -> Node:
    av = a.value
    if av.ndim != 2:
        raise ValueError("l2_normalize_rows expects a 2-D array")
    norms = np.linalg.norm(av, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NonFiniteError("l2_normalize_rows: zero-norm row")
    y = av / norms

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return _make(y, (a,), vjp, "l2_normalize_rows")


def similarity(a: Node, b: Node) -> Node:
    """Dot-product similarity matrix ``a @ b.T``."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"similarity: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv.T, (a, b), lambda g: (g @ bv, g.T @ av), "similarity")


def rowdot(a: Node, b: Node) -> Node:
    """Row-wise dot products, shape (K,)."""
    if a.shape != b.shape or a.value.ndim != 2:
        raise ValueError(f"rowdot: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(np.einsum("ij,ij->i", av, bv), (a, b),
                 lambda g: (g[:, None] * bv, g[:, None] * av), "rowdot")


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = list(nodes)
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch ({exc})") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def offdiag(a: Node) -> Node:
    """Row-wise off-diagonal entries of a square matrix, shape (K, K-1).

    Entry ``[i, j]`` is neighbour ``j`` of row ``i`` in ascending index
    order with ``i`` itself skipped.
    """
    av = a.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ValueError("offdiag expects a square matrix")
    k = av.shape[0]
    keep = ~np.eye(k, dtype=bool)
    out = av[keep].reshape(k, k - 1)

    def vjp(g):
        full = np.zeros((k, k))
        full[keep] = g.ravel()
        return (full,)

    return _make(out, (a,), vjp, "offdiag")


def stop_gradient(a: Node) -> Node:
    return Node(a.value)


def custom_op(forward: Callable, vjp: Callable, *inputs: Node, name: str = "custom") -> Node:
    """Register an op with a hand-written vector-Jacobian product.

    ``forward(*values)`` returns ``(out, residuals)``; ``vjp(g, residuals)``
    returns one adjoint per input.
    """
    out, res = forward(*(n.value for n in inputs))

    def _vjp(g):
        grads = vjp(g, res)
        return grads if isinstance(grads, tuple) else (grads,)

    return _make(out, inputs, _vjp, name)


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(root: Node, free: bool = True) -> dict[Node, np.ndarray]:
    """Adjoints of every gradient-requiring leaf reachable from scalar ``root``.

    With ``free`` the intermediate graph is released afterwards, so the tape
    cannot be replayed.
    """
    if root.value.shape not in ((), (1,)):
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in _toposort(root):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = g
            continue
        if node.vjp is None:
            raise RuntimeError(f"tape for {node!r} was already freed")
        for p, pg in zip(node.parents, node.vjp(g)):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else np.array(pg)
        if free:
            node.vjp = None
            node.parents = ()
    return leaves


def grad_check(f: Callable[[Node], Node], x: np.ndarray, step: float = 1e-6,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is ``|analytic - fd| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    xn = leaf(x)
    out = f(xn)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("f(x) is not finite")
    analytic = backward(out).get(xn, np.zeros_like(x)).ravel()
    flat = x.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = f(constant(xp.reshape(x.shape))).item()
        fm = f(constant(xm.reshape(x.shape))).item()
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
    return worst
