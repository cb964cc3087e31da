"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the prediction and trading networks compose are
provided.  A :class:`Tape` records each operation whose inputs need
gradients; :meth:`Tape.backward` replays the records once, in reverse.
Values created without a tape (or from plain arrays) are constants.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(k for k, s in enumerate(shape) if s == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("value", "grad", "tape", "needs_grad")
    __array_priority__ = 100

    def __init__(self, value, tape: "Tape | None" = None, needs_grad: bool = False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.tape = tape
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, needs_grad={self.needs_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad = self.grad + g

    # arithmetic
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_var(o)))

    def __rsub__(self, o):
        return add(as_var(o), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(as_var(o), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class Tape:
    """Records differentiable operations for a single backward pass."""

    def __init__(self):
        self._records = []
        self._used = False

    def watch(self, value) -> Var:
        """A leaf that accumulates gradient."""
        if self._used:
            raise TapeError("tape already consumed by backward; start a new forward pass")
        return Var(np.array(value, dtype=float, copy=True), self, True)

    def _record(self, out: Var, fn) -> None:
        self._records.append((out, fn))

    def backward(self, out: Var, adjoint=None) -> None:
        if self._used:
            raise TapeError("backward called twice on one forward pass")
        if out.tape is not self or not self._records:
            raise TapeError("backward before forward: output was not recorded on this tape")
        self._used = True
        seed = np.ones_like(out.value) if adjoint is None else np.broadcast_to(np.asarray(adjoint, dtype=float), out.value.shape)
        out.grad = np.array(seed, dtype=float)
        for node, fn in reversed(self._records):
            if node.grad is not None:
                fn(node.grad)
        self._records = []


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.needs_grad:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _out(value, tape, fn):
    if tape is None:
        return Var(value)
    if tape._used:
        raise TapeError("tape already consumed by backward; start a new forward pass")
    v = Var(value, tape, True)
    tape._record(v, fn)
    return v


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _tape_of(a, b)

    def fn(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _out(a.value + b.value, tape, fn)


def neg(a) -> Var:
    a = as_var(a)

    def fn(g):
        a._accum(-g)

    return _out(-a.value, _tape_of(a), fn)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _tape_of(a, b)

    def fn(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    return _out(a.value * b.value, tape, fn)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _tape_of(a, b)
    q = a.value / b.value

    def fn(g):
        if a.needs_grad:
            a._accum(_unbroadcast(g / b.value, a.shape))
        if b.needs_grad:
            b._accum(_unbroadcast(-g * q / b.value, b.shape))

    return _out(q, tape, fn)


def square(a) -> Var:
    a = as_var(a)

    def fn(g):
        a._accum(2.0 * a.value * g)

    return _out(a.value * a.value, _tape_of(a), fn)


def linear(x, weight) -> Var:
    """``x @ weight.T`` over the last axis of ``x``."""
    x, weight = as_var(x), as_var(weight)
    tape = _tape_of(x, weight)
    k, m = weight.shape
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, m)
    out = (x2 @ weight.value.T).reshape(lead + (k,))

    def fn(g):
        g2 = g.reshape(-1, k)
        if x.needs_grad:
            x._accum((g2 @ weight.value).reshape(x.shape))
        if weight.needs_grad:
            weight._accum(g2.T @ x2)

    return _out(out, tape, fn)


def leaky_relu(x, slope: float = 0.01) -> Var:
    """LeakyReLU; the derivative at exactly 0 is taken as ``slope``."""
    x = as_var(x)
    pos = x.value > 0
    out = np.where(pos, x.value, slope * x.value)

    def fn(g):
        x._accum(np.where(pos, g, slope * g))

    return _out(out, _tape_of(x), fn)


def relu(x) -> Var:
    """ReLU; the subgradient at exactly 0 is 0."""
    x = as_var(x)
    pos = x.value > 0

    def fn(g):
        x._accum(np.where(pos, g, 0.0))

    return _out(np.where(pos, x.value, 0.0), _tape_of(x), fn)


def vsum(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _out(out, _tape_of(x), fn)


def vmean(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return vsum(x, axis, keepdims) * (1.0 / count)


def getitem(x, idx) -> Var:
    x = as_var(x)
    out = x.value[idx]

    def fn(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        x._accum(full)

    return _out(out, _tape_of(x), fn)


def reshape(x, shape) -> Var:
    x = as_var(x)

    def fn(g):
        x._accum(g.reshape(x.shape))

    return _out(x.value.reshape(shape), _tape_of(x), fn)


def expand(x, axis) -> Var:
    x = as_var(x)

    def fn(g):
        x._accum(np.squeeze(g, axis=axis))

    return _out(np.expand_dims(x.value, axis), _tape_of(x), fn)


def batch_matvec(mat: np.ndarray, x) -> Var:
    """``out[b] = mat[b] @ x[b]`` with ``mat`` a constant ``(B, m, m)`` array."""
    x = as_var(x)
    out = np.einsum("bij,bj->bi", mat, x.value)

    def fn(g):
        x._accum(np.einsum("bij,bi->bj", mat, g))

    return _out(out, _tape_of(x), fn)
