"""Reverse-mode automatic differentiation on numpy arrays.

A small tape engine: forward operations on :class:`Var` record one node
each, in execution order, onto a :class:`Tape`.  ``Tape.backward`` walks
the nodes in reverse and accumulates vector-Jacobian products into a
gradient per leaf variable.

Design constraints the rest of the code relies on:

* everything is ``float64``; forward values are plain numpy arrays
  reachable through ``Var.data``,
* node order is the recording order, so replaying an identical forward
  pass yields bit-identical gradients,
* discrete choices (index sets, masks, branch selections) never live on
  the tape -- they are passed in as constants, which makes the recorded
  function piecewise smooth around the evaluation point and gives those
  selections an exactly-zero gradient,
* one backward pass per tape; a second call raises.

The adjoint rule for each op is looked up by name in :data:`VJPS` at
backward time, which keeps the rules replaceable for harness self-tests.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    """Misuse of the tape (backward before forward, double backward...)."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.reshape(g, shape)


def _sum_vjp(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _gather_vjp(g, idx, shape):
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, idx, g)
    return out


# Adjoint rules: name -> fn(upstream_grad, *saved) -> tuple of grads,
# one per recorded input, already reduced to the input shapes.
VJPS = {
    "add": lambda g, sa, sb: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    "addc": lambda g, sa: (_unbroadcast(g, sa),),
    "sub": lambda g, sa, sb: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    "rsubc": lambda g, sa: (_unbroadcast(-g, sa),),
    "mul": lambda g, a, b, sa, sb: (_unbroadcast(g * b, sa), _unbroadcast(g * a, sb)),
    "mulc": lambda g, c, sa: (_unbroadcast(g * c, sa),),
    "div": lambda g, a, b, sa, sb: (
        _unbroadcast(g / b, sa),
        _unbroadcast(-g * a / (b * b), sb),
    ),
    "rdivc": lambda g, c, a, sa: (_unbroadcast(-g * c / (a * a), sa),),
    "neg": lambda g: (-g,),
    "powc": lambda g, a, p: (g * p * np.power(a, p - 1),),
    "exp": lambda g, out: (g * out,),
    "sqrt": lambda g, out: (g * 0.5 / np.maximum(out, 1e-150),),
    "sigmoid": lambda g, out: (g * out * (1.0 - out),),
    "relu": lambda g, mask: (g * mask,),
    "sum": lambda g, shape, axis: (_sum_vjp(g, shape, axis),),
    "gather": lambda g, idx, shape: (_gather_vjp(g, idx, shape),),
    "scatter_add": lambda g, idx: (g[idx],),
}


class Tape:
    """Execution record for one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[tuple[str, int, tuple[int, ...], tuple]] = []
        self._next_id = 0
        self._consumed = False

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data) -> "Var":
        """Register a differentiable input (parameter) on this tape."""
        return Var(self, np.asarray(data, dtype=np.float64))

    def _record(self, op: str, data: np.ndarray, in_ids: tuple[int, ...], saved: tuple) -> "Var":
        out = Var(self, data)
        self._nodes.append((op, out.id, in_ids, saved))
        return out

    def backward(self, root: "Var", seed=1.0) -> dict[int, np.ndarray]:
        """Propagate ``d(seed * root)`` back to every leaf.

        Returns a map from ``Var.id`` to gradient array.  Leaves that the
        root does not depend on are absent (gradient zero).
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if root.tape is not self:
            raise TapeError("root variable was not recorded on this tape")
        if not self._nodes:
            raise TapeError("backward called before any forward operation was recorded")
        self._consumed = True

        grads: dict[int, np.ndarray] = {
            root.id: np.broadcast_to(np.asarray(seed, dtype=np.float64), root.data.shape)
        }
        for op, out_id, in_ids, saved in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for in_id, gin in zip(in_ids, VJPS[op](g, *saved)):
                acc = grads.get(in_id)
                grads[in_id] = gin if acc is None else acc + gin
        return grads


class Var:
    """A ``float64`` array plus its record on a :class:`Tape`."""

    __slots__ = ("tape", "data", "id")

    # make numpy defer mixed expressions to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape: Tape, data: np.ndarray) -> None:
        self.tape = tape
        self.data = np.asarray(data, dtype=np.float64)
        self.id = tape._new_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape._record(
                "add", self.data + other.data, (self.id, other.id), (self.shape, other.shape)
            )
        other = np.asarray(other, dtype=np.float64)
        return self.tape._record("addc", self.data + other, (self.id,), (self.shape,))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape._record(
                "sub", self.data - other.data, (self.id, other.id), (self.shape, other.shape)
            )
        other = np.asarray(other, dtype=np.float64)
        return self.tape._record("addc", self.data - other, (self.id,), (self.shape,))

    def __rsub__(self, other):
        other = np.asarray(other, dtype=np.float64)
        return self.tape._record("rsubc", other - self.data, (self.id,), (self.shape,))

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape._record(
                "mul",
                self.data * other.data,
                (self.id, other.id),
                (self.data, other.data, self.shape, other.shape),
            )
        other = np.asarray(other, dtype=np.float64)
        return self.tape._record("mulc", self.data * other, (self.id,), (other, self.shape))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.tape._record(
                "div",
                self.data / other.data,
                (self.id, other.id),
                (self.data, other.data, self.shape, other.shape),
            )
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=np.float64)
        return self.tape._record("rdivc", other / self.data, (self.id,), (other, self.data, self.shape))

    def __neg__(self):
        return self.tape._record("neg", -self.data, (self.id,), ())

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        p = float(p)
        return self.tape._record("powc", np.power(self.data, p), (self.id,), (self.data, p))

    # -- elementwise functions ------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return self.tape._record("exp", out, (self.id,), (out,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return self.tape._record("sqrt", out, (self.id,), (out,))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return self.tape._record("sigmoid", out, (self.id,), (out,))

    def relu(self):
        mask = (self.data > 0.0).astype(np.float64)
        return self.tape._record("relu", self.data * mask, (self.id,), (mask,))

    def sum(self, axis=None):
        return self.tape._record("sum", np.sum(self.data, axis=axis), (self.id,), (self.shape, axis))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- polymorphic helpers ------------------------------------------------
#
# The rendering pipeline is written once against these; passing plain
# arrays gives a fast untaped evaluation, passing Vars records gradients.


def value(x) -> np.ndarray:
    """Forward value of ``x`` whether taped or not."""
    return x.data if isinstance(x, Var) else np.asarray(x)


def exp(x):
    return x.exp() if isinstance(x, Var) else np.exp(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Var) else np.sqrt(x)


def sigmoid(x):
    return x.sigmoid() if isinstance(x, Var) else _sigmoid(np.asarray(x, dtype=np.float64))


def relu(x):
    return x.relu() if isinstance(x, Var) else np.maximum(x, 0.0)


def asum(x, axis=None):
    return x.sum(axis=axis) if isinstance(x, Var) else np.sum(x, axis=axis)


def gather(x, idx):
    """``x[idx]`` with a scatter-add adjoint (1-D ``x``)."""
    idx = np.asarray(idx)
    if isinstance(x, Var):
        return x.tape._record("gather", x.data[idx], (x.id,), (idx, x.shape))
    return np.asarray(x)[idx]


def scatter_add(x, idx, size: int):
    """Length-``size`` histogram of ``x`` summed by integer bin ``idx``.

    Accumulation is sequential in element order, so the result is
    bit-reproducible.
    """
    idx = np.asarray(idx)
    if isinstance(x, Var):
        out = np.zeros(size, dtype=np.float64)
        np.add.at(out, idx, x.data)
        return x.tape._record("scatter_add", out, (x.id,), (idx,))
    out = np.zeros(size, dtype=np.float64)
    np.add.at(out, idx, np.asarray(x, dtype=np.float64))
    return out


def central_difference(f, x: np.ndarray, indices, eps: float) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` along ``indices``."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        out[n] = (f(xp) - f(xm)) / (2.0 * eps)
    return out
