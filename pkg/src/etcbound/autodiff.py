"""Minimal reverse-mode differentiation over scalars and small dense vectors.

Nodes hold either a Python float or a 1-D float64 array.  The only implicit
broadcasting is scalar-against-vector; anything fancier is out of scope.
Graphs are rebuilt from scratch on every use (no persistent tape), traversal
order is fixed by construction order, and all arithmetic is double precision,
so identical inputs produce bit-identical values and adjoints.

Hinge convention: ``maximum(x, floor)`` has derivative 1 where x > floor and
0 where x <= floor, i.e. the subgradient at the kink is fixed to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Number = float | np.ndarray


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class DiffValue:
    """One node of the differentiation graph: a value plus its adjoint."""

    __slots__ = ("value", "adjoint", "parents", "_bw", "_gen")

    def __init__(
        self,
        value: Number,
        parents: tuple["DiffValue", ...] = (),
        bw: Callable[[Number], None] | None = None,
    ):
        if isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=np.float64)
        else:
            value = float(value)
        self.value = value
        self.adjoint: Number = 0.0
        self.parents = parents
        self._bw = bw
        self._gen = 0

    def __repr__(self) -> str:
        return f"DiffValue({self.value!r})"

    # arithmetic sugar, all routed through the module-level primitives
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


def lift(x) -> DiffValue:
    """Wrap a plain number or array as a constant node."""
    return x if isinstance(x, DiffValue) else DiffValue(x)


def value_of(x) -> Number:
    return x.value if isinstance(x, DiffValue) else x


def _acc(node: DiffValue, g: Number) -> None:
    # A scalar operand broadcast against a vector collects the summed gradient.
    if not isinstance(node.value, np.ndarray) and isinstance(g, np.ndarray):
        g = float(np.sum(g))
    node.adjoint = node.adjoint + g


def add(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    out = DiffValue(a.value + b.value, (a, b))

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    out._bw = bw
    return out


def sub(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    out = DiffValue(a.value - b.value, (a, b))

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    out._bw = bw
    return out


def mul(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    out = DiffValue(a.value * b.value, (a, b))

    def bw(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    out._bw = bw
    return out


def div(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    if np.any(np.asarray(b.value) == 0.0):
        raise DomainError("div: division by zero")
    out = DiffValue(a.value / b.value, (a, b))

    def bw(g):
        _acc(a, g / b.value)
        _acc(b, -g * a.value / (b.value * b.value))

    out._bw = bw
    return out


def neg(a) -> DiffValue:
    a = lift(a)
    out = DiffValue(-a.value, (a,))

    def bw(g):
        _acc(a, -g)

    out._bw = bw
    return out


def exp(a) -> DiffValue:
    a = lift(a)
    v = np.exp(a.value) if isinstance(a.value, np.ndarray) else math.exp(a.value)
    out = DiffValue(v, (a,))

    def bw(g):
        _acc(a, g * out.value)

    out._bw = bw
    return out


def log(a) -> DiffValue:
    a = lift(a)
    if np.any(np.asarray(a.value) <= 0.0):
        raise DomainError("log: non-positive input")
    v = np.log(a.value) if isinstance(a.value, np.ndarray) else math.log(a.value)
    out = DiffValue(v, (a,))

    def bw(g):
        _acc(a, g / a.value)

    out._bw = bw
    return out


def sqrt(a) -> DiffValue:
    a = lift(a)
    if np.any(np.asarray(a.value) < 0.0):
        raise DomainError("sqrt: negative input")
    v = np.sqrt(a.value) if isinstance(a.value, np.ndarray) else math.sqrt(a.value)
    out = DiffValue(v, (a,))

    def bw(g):
        _acc(a, g * 0.5 / out.value)

    out._bw = bw
    return out


def _sigmoid_raw(v: Number) -> Number:
    if isinstance(v, np.ndarray):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    ev = math.exp(v)
    return ev / (1.0 + ev)


def sigmoid(a) -> DiffValue:
    a = lift(a)
    out = DiffValue(_sigmoid_raw(a.value), (a,))

    def bw(g):
        _acc(a, g * out.value * (1.0 - out.value))

    out._bw = bw
    return out


def tanh(a) -> DiffValue:
    a = lift(a)
    v = np.tanh(a.value) if isinstance(a.value, np.ndarray) else math.tanh(a.value)
    out = DiffValue(v, (a,))

    def bw(g):
        _acc(a, g * (1.0 - out.value * out.value))

    out._bw = bw
    return out


def square(a) -> DiffValue:
    a = lift(a)
    out = DiffValue(a.value * a.value, (a,))

    def bw(g):
        _acc(a, g * 2.0 * a.value)

    out._bw = bw
    return out


def maximum(a, floor: float) -> DiffValue:
    """max(a, floor) with a constant floor; zero subgradient at the kink."""
    a = lift(a)
    floor = float(floor)
    v = np.maximum(a.value, floor) if isinstance(a.value, np.ndarray) else max(a.value, floor)
    out = DiffValue(v, (a,))

    def bw(g):
        mask = np.greater(a.value, floor).astype(np.float64)
        _acc(a, g * (mask if isinstance(a.value, np.ndarray) else float(mask)))

    out._bw = bw
    return out


def stop_gradient(a) -> DiffValue:
    """Pass the value through; block all adjoint flow to the input."""
    a = lift(a)
    v = a.value.copy() if isinstance(a.value, np.ndarray) else a.value
    return DiffValue(v)


def wsum(weights: Sequence[float], items: Sequence) -> DiffValue:
    """Weighted sum of scalar nodes with constant weights."""
    items = [lift(x) for x in items]
    weights = [float(w) for w in weights]
    out = DiffValue(sum(w * x.value for w, x in zip(weights, items)), tuple(items))

    def bw(g):
        for w, x in zip(weights, items):
            _acc(x, g * w)

    out._bw = bw
    return out


def vsum(a) -> DiffValue:
    a = lift(a)
    out = DiffValue(float(np.sum(a.value)), (a,))

    def bw(g):
        _acc(a, np.full(np.shape(a.value), g))

    out._bw = bw
    return out


def vmean(a) -> DiffValue:
    a = lift(a)
    n = np.size(a.value)
    out = DiffValue(float(np.sum(a.value)) / n, (a,))

    def bw(g):
        _acc(a, np.full(np.shape(a.value), g / n))

    out._bw = bw
    return out


def dot(a, b) -> DiffValue:
    a, b = lift(a), lift(b)
    out = DiffValue(float(np.dot(a.value, b.value)), (a, b))

    def bw(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    out._bw = bw
    return out


def matvec(A: np.ndarray, x) -> DiffValue:
    """Constant matrix times vector node: a batch of weighted sums."""
    x = lift(x)
    A = np.asarray(A, dtype=np.float64)
    out = DiffValue(A @ x.value, (x,))

    def bw(g):
        _acc(x, A.T @ g)

    out._bw = bw
    return out


def stack(items: Sequence) -> DiffValue:
    """Scalar nodes into one vector node."""
    items = [lift(x) for x in items]
    out = DiffValue(np.array([x.value for x in items], dtype=np.float64), tuple(items))

    def bw(g):
        for i, x in enumerate(items):
            _acc(x, float(g[i]))

    out._bw = bw
    return out


def param_matvec(W, x) -> DiffValue:
    """Matrix-vector product where either side may require gradients.

    The matrix node holds a 2-D value; this is the batched form of ``dot``
    used by the prediction MLP.
    """
    W, x = lift(W), lift(x)
    out = DiffValue(W.value @ x.value, (W, x))

    def bw(g):
        W.adjoint = W.adjoint + np.outer(g, x.value)
        _acc(x, W.value.T @ g)

    out._bw = bw
    return out


def vget(v, i: int) -> DiffValue:
    """Scalar element of a vector node."""
    v = lift(v)
    i = int(i)
    out = DiffValue(float(v.value[i]), (v,))

    def bw(g):
        grad = np.zeros(np.shape(v.value))
        grad[i] = g
        _acc(v, grad)

    out._bw = bw
    return out


def sig_window(c, w, timeline: np.ndarray, k: float, lo_coef: float, hi_coef: float) -> DiffValue:
    """Fused soft rectangle sigmoid(k (t - A)) * sigmoid(k (B - t)) with
    A = c + lo_coef * w and B = c + hi_coef * w; one node for the whole mask."""
    c, w = lift(c), lift(w)
    t = np.asarray(timeline, dtype=np.float64)
    k = float(k)
    a = float(c.value) + lo_coef * float(w.value)
    b = float(c.value) + hi_coef * float(w.value)
    s1 = _sigmoid_raw(k * (t - a))
    s2 = _sigmoid_raw(k * (b - t))
    out = DiffValue(s1 * s2, (c, w))

    def bw(g):
        d_a = -k * s1 * (1.0 - s1) * s2
        d_b = k * s1 * s2 * (1.0 - s2)
        g_a = float(np.dot(g, d_a))
        g_b = float(np.dot(g, d_b))
        _acc(c, g_a + g_b)
        _acc(w, lo_coef * g_a + hi_coef * g_b)

    out._bw = bw
    return out


def cosine(a, b) -> DiffValue:
    """Cosine similarity of two vectors; defined as 0 when either is zero."""
    a, b = lift(a), lift(b)
    na = float(np.linalg.norm(a.value))
    nb = float(np.linalg.norm(b.value))
    if na == 0.0 or nb == 0.0:
        return DiffValue(0.0, (a, b), bw=lambda g: None)
    c = float(np.dot(a.value, b.value)) / (na * nb)
    out = DiffValue(c, (a, b))

    def bw(g):
        _acc(a, g * (b.value / (na * nb) - c * a.value / (na * na)))
        _acc(b, g * (a.value / (na * nb) - c * b.value / (nb * nb)))

    out._bw = bw
    return out


_GENERATION = 0


def _toposort(root: DiffValue) -> list[DiffValue]:
    global _GENERATION
    _GENERATION += 1
    gen = _GENERATION
    order: list[DiffValue] = []
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node._gen == gen:
            continue
        node._gen = gen
        stack.append((node, True))
        for p in node.parents:
            if p._gen != gen:
                stack.append((p, False))
    return order


def backward(root: DiffValue) -> None:
    """Populate adjoints of every node reachable from a scalar root."""
    if isinstance(root.value, np.ndarray):
        raise ValueError("backward: root must be scalar")
    order = _toposort(root)
    for node in order:
        node.adjoint = 0.0
    root.adjoint = 1.0
    for node in reversed(order):
        if node._bw is not None:
            node._bw(node.adjoint)


@dataclass
class GradCheckEntry:
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    n_params: int
    h: float
    tol: float
    max_rel_error: float
    failures: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _leaf_adjoints(leaves: Sequence[DiffValue]) -> np.ndarray:
    parts = []
    for leaf in leaves:
        adj = np.broadcast_to(np.asarray(leaf.adjoint, dtype=np.float64), np.shape(leaf.value))
        parts.append(np.atleast_1d(adj).ravel())
    return np.concatenate(parts) if parts else np.array([])


def grad_check(
    f: Callable[[np.ndarray], tuple[DiffValue, Sequence[DiffValue]]],
    x: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``f`` at ``x`` to finite differences.

    ``f`` maps a flat parameter vector to ``(root, leaves)`` where the leaf
    values, concatenated in order, reproduce ``x``.  The relative error uses a
    unit floor, max(|analytic|, |numeric|, 1), so tiny gradients are compared
    absolutely.  Failures are report entries, never exceptions.
    """
    x = np.asarray(x, dtype=np.float64)
    root, leaves = f(x)
    backward(root)
    g_ad = _leaf_adjoints(leaves)
    if g_ad.size != x.size:
        raise ValueError(f"grad_check: leaves cover {g_ad.size} params, expected {x.size}")

    failures = []
    max_rel = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        fp = float(f(xp)[0].value)
        xm = x.copy()
        xm[i] -= h
        fm = float(f(xm)[0].value)
        fd = (fp - fm) / (2.0 * h)
        ad = float(g_ad[i])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
        max_rel = max(max_rel, rel)
        if rel > tol:
            failures.append(GradCheckEntry(i, ad, fd, rel))
    return GradCheckReport(n_params=x.size, h=h, tol=tol, max_rel_error=max_rel, failures=failures)
