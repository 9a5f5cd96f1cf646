"""Minimal reverse-mode differentiation over NumPy arrays.

Only the operations used by the routing pipeline are provided. Every op
accepts plain arrays or :class:`Var` nodes; when no argument is a
:class:`Var` the op returns a plain ``ndarray``, so the same model code
serves both plain evaluation and gradient tracing.

Example::

    x = Var(np.array([1.0, 2.0]))
    y = tsum(square(x)) * 0.5
    grads = grad(y, [x])      # -> [array([1., 2.])]
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Var:
    """A node on the tape: a value plus the recipe to pull gradients back."""

    __slots__ = ("value", "parents", "vjps")
    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var

    def __init__(
        self,
        value,
        parents: tuple["Var", ...] = (),
        vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = (),
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape})"

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


def value(x) -> np.ndarray:
    """Strip the tape: return the numeric value of ``x``."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _traced(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(out: np.ndarray, pairs: Iterable[tuple[object, Callable]]) -> Var:
    parents, vjps = [], []
    for p, fn in pairs:
        if isinstance(p, Var):
            parents.append(p)
            vjps.append(fn)
    return Var(out, tuple(parents), tuple(vjps))


# -- elementwise arithmetic --------------------------------------------------


def add(x, y):
    out = value(x) + value(y)
    if not _traced(x, y):
        return out
    xs, ys = np.shape(value(x)), np.shape(value(y))
    return _node(out, [(x, lambda g: _unbroadcast(g, xs)), (y, lambda g: _unbroadcast(g, ys))])


def sub(x, y):
    out = value(x) - value(y)
    if not _traced(x, y):
        return out
    xs, ys = np.shape(value(x)), np.shape(value(y))
    return _node(out, [(x, lambda g: _unbroadcast(g, xs)), (y, lambda g: _unbroadcast(-g, ys))])


def mul(x, y):
    xv, yv = value(x), value(y)
    out = xv * yv
    if not _traced(x, y):
        return out
    return _node(
        out,
        [
            (x, lambda g: _unbroadcast(g * yv, xv.shape)),
            (y, lambda g: _unbroadcast(g * xv, yv.shape)),
        ],
    )


def div(x, y):
    xv, yv = value(x), value(y)
    out = xv / yv
    if not _traced(x, y):
        return out
    return _node(
        out,
        [
            (x, lambda g: _unbroadcast(g / yv, xv.shape)),
            (y, lambda g: _unbroadcast(-g * xv / yv**2, yv.shape)),
        ],
    )


def square(x):
    xv = value(x)
    out = xv * xv
    if not _traced(x):
        return out
    return _node(out, [(x, lambda g: 2.0 * xv * g)])


def exp(x):
    out = np.exp(value(x))
    if not _traced(x):
        return out
    return _node(out, [(x, lambda g: g * out)])


def log(x):
    xv = value(x)
    out = np.log(xv)
    if not _traced(x):
        return out
    return _node(out, [(x, lambda g: g / xv)])


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0.0)
    if not _traced(x):
        return out
    # subgradient 0 at the kink
    return _node(out, [(x, lambda g: g * (xv > 0.0))])


def minimum(x, bound):
    """Elementwise ``min(x, bound)``; ``bound`` is treated as a constant."""
    xv, bv = value(x), value(bound)
    out = np.minimum(xv, bv)
    if not _traced(x):
        return out
    return _node(out, [(x, lambda g: _unbroadcast(g * (xv <= bv), xv.shape))])


# -- reductions and shape ------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False):
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not _traced(x):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _node(out, [(x, vjp)])


def mean(x, axis=None, keepdims: bool = False):
    xv = value(x)
    count = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape: Sequence[int]):
    xv = value(x)
    out = xv.reshape(shape)
    if not _traced(x):
        return out
    return _node(out, [(x, lambda g: g.reshape(xv.shape))])


def expand_dims(x, axis: int):
    xv = value(x)
    return reshape(x, np.expand_dims(xv, axis).shape)


def take(x, index: int):
    """``x[index]`` along the first axis."""
    xv = value(x)
    out = xv[index]
    if not _traced(x):
        return out

    def vjp(g):
        full = np.zeros_like(xv)
        full[index] = g
        return full

    return _node(out, [(x, vjp)])


def einsum(subscripts: str, *operands):
    """Explicit-output einsum without ellipses or repeated input indices."""
    vals = [value(o) for o in operands]
    out = np.einsum(subscripts, *vals, optimize=True)
    if not _traced(*operands):
        return out
    lhs, rhs = subscripts.replace(" ", "").split("->")
    terms = lhs.split(",")
    if len(terms) != len(operands):
        raise ValueError(f"einsum: {subscripts!r} expects {len(terms)} operands")
    pairs = []
    for i, op in enumerate(operands):
        others = [t for j, t in enumerate(terms) if j != i]
        available = set(rhs).union(*others) if others else set(rhs)
        if len(set(terms[i])) != len(terms[i]) or not set(terms[i]) <= available:
            raise ValueError(f"einsum: cannot differentiate operand {i} of {subscripts!r}")
        spec = ",".join([rhs, *others]) + "->" + terms[i]
        other_vals = [v for j, v in enumerate(vals) if j != i]
        pairs.append(
            (op, lambda g, spec=spec, other_vals=other_vals: np.einsum(spec, g, *other_vals, optimize=True))
        )
    return _node(out, pairs)


def softmax_idle(x, axis: int = -1):
    """Softmax along ``axis`` with one extra fixed logit 0 (the idle slot).

    Returned shares are strictly positive and sum to strictly less than 1.
    """
    xv = value(x)
    m = np.maximum(np.max(xv, axis=axis, keepdims=True), 0.0)
    e = np.exp(xv - m)
    out = e / (np.exp(-m) + e.sum(axis=axis, keepdims=True))
    if not _traced(x):
        return out
    return _node(out, [(x, lambda g: out * (g - np.sum(g * out, axis=axis, keepdims=True)))])


# -- driver --------------------------------------------------------------------


def _toposort(root: Var) -> list[Var]:
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


def grad(output, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of the scalar ``output`` with respect to each leaf in ``wrt``.

    A constant output (not a :class:`Var`, or not connected to a leaf) yields
    zero gradients.
    """
    if not isinstance(output, Var):
        return [np.zeros_like(w.value) for w in wrt]
    if output.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(_toposort(output)):
        g = grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            key = id(parent)
            grads[key] = grads[key] + contrib if key in grads else contrib
    return [grads.get(id(w), np.zeros_like(w.value)).reshape(w.shape) for w in wrt]
