"""Tape-based reverse-mode differentiation over matrix-valued nodes.

A :class:`Tape` records every operation whose inputs include a tracked node.
Values that are plain arrays (or untracked :class:`Var` objects) act as
constants and receive no gradient.  :func:`backward` replays the tape in
exact reverse order, so identical tapes give bit-identical gradients.

    tape = Tape()
    w = tape.param("w", np.ones((2, 2)))
    loss = sum_all(relu(w))
    grads = backward(loss)          # {"w": array([[1., 1.], [1., 1.]])}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .errors import ContractError, InputError, NumericError, ShapeError


class Tape:
    """Ordered record of the operations executed during one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value) -> "Var":
        if name in self.params:
            raise InputError(f"parameter {name!r} registered twice on the tape")
        v = Var(nx.as_dense(value).copy(), tape=self, name=name)
        self.params[name] = v
        return v

    def __len__(self):
        return len(self.nodes)


class Var:
    """A matrix value, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "op", "name")

    def __init__(self, value, tape: Optional[Tape] = None, parents=(), backward_fn=None, op="leaf", name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # Operator sugar used by the model code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(x) -> Var:
    """Wrap an array as an untracked constant (sparse matrices pass through)."""
    if isinstance(x, Var):
        return x
    if sp.issparse(x):
        return Var(x)
    return Var(nx.as_dense(x))


def _tape_of(*vs: Var) -> Optional[Tape]:
    tape = None
    for v in vs:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = v.tape
    return tape


def _make(value, parents, backward_fn, op) -> Var:
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value, op=op)
    return Var(value, tape=tape, parents=parents, backward_fn=backward_fn, op=op)


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if sp.issparse(a.value):
        return sparse_matmul(a.value, b)
    value = nx.dense_matmul(a.value, b.value)

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return _make(value, (a, b), back, "matmul")


def sparse_matmul(s, b) -> Var:
    """``s @ b`` with ``s`` a constant sparse matrix; only ``b`` gets a gradient."""
    if isinstance(s, Var):
        if s.tracked:
            raise ContractError("the sparse operand of sparse_matmul must be a constant")
        s = s.value
    b = const(b)
    value = nx.sparse_dense_matmul(s, b.value)

    def back(g):
        return (np.asarray(s.T @ g),)

    return _make(value, (b,), back, "sparse_matmul")


def transpose(a) -> Var:
    a = const(a)
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add_row_bias(a, bias) -> Var:
    """``a + 1 bias`` where ``bias`` is a 1 x k row broadcast over the rows of ``a``."""
    a, bias = const(a), const(bias)
    if bias.shape != (1, a.shape[1]):
        raise ShapeError(f"bias shape {bias.shape} does not match rows of width {a.shape[1]}")

    def back(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make(a.value + bias.value, (a, bias), back, "add_row_bias")


def concat_broadcast_row(x, z) -> Var:
    """Append the row ``z`` (1 x d) to every row of ``x`` (n x f) -> n x (f + d)."""
    x, z = const(x), const(z)
    if z.value.shape[0] != 1:
        raise ShapeError(f"z must be a single row, got shape {z.shape}")
    n, f = x.shape
    value = np.concatenate([x.value, np.broadcast_to(z.value, (n, z.shape[1]))], axis=1)

    def back(g):
        return g[:, :f], g[:, f:].sum(axis=0, keepdims=True)

    return _make(value, (x, z), back, "concat_broadcast_row")


def relu(a) -> Var:
    a = const(a)
    mask = a.value > 0  # derivative at exactly 0 is taken as 0

    return _make(nx.relu(a.value), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Var:
    a = const(a)
    s = nx.sigmoid(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a) -> Var:
    a = const(a)
    e = nx.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def identity(a) -> Var:
    a = const(a)
    return _make(a.value.copy(), (a,), lambda g: (g,), "identity")


def _same_shape(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "add")
    return _make(nx.elementwise(a.value, b.value, "add"), (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "sub")
    return _make(nx.elementwise(a.value, b.value, "sub"), (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(nx.elementwise(av, bv, "mul"), (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float) -> Var:
    a = const(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def sum_all(a) -> Var:
    a = const(a)
    shape = a.shape
    return _make(nx.reduce(a.value, None, "sum"), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean_rows(a) -> Var:
    """Column-wise mean over the rows: (m, k) -> (1, k)."""
    a = const(a)
    m = a.shape[0]
    if m == 0:
        raise ShapeError("mean over zero rows")
    shape = a.shape
    return _make(nx.reduce(a.value, 0, "mean"), (a,), lambda g: (np.broadcast_to(g / m, shape).copy(),), "mean_rows")


def weighted_bce_with_logits(logits, targets, pos_weight: float = 1.0) -> Var:
    """Sum over entries of ``w*y*log sigmoid(t) + (1-y)*log(1-sigmoid(t))``.

    This is a log-likelihood (non-positive).  ``targets`` is a constant.
    Uses ``log sigmoid(t) = -softplus(-t)`` and ``log(1 - sigmoid(t)) = -softplus(t)``.
    """
    logits = const(logits)
    y = nx.as_dense(targets.value if isinstance(targets, Var) else targets)
    if y.shape != logits.shape:
        raise ShapeError(f"targets {y.shape} and logits {logits.shape} differ")
    t = logits.value
    w = float(pos_weight)
    e = np.exp(-np.abs(t))
    log1p_e = np.log1p(e)
    sp_pos = np.maximum(t, 0.0) + log1p_e  # softplus(t) = -log(1 - sigmoid(t))
    sp_neg = sp_pos - t  # softplus(-t) = -log sigmoid(t)
    value = -(w * np.sum(y * sp_neg) + np.sum((1.0 - y) * sp_pos))
    s = np.where(t >= 0, 1.0, e) / (1.0 + e)
    del e, log1p_e, sp_pos, sp_neg

    def back(g):
        return (g[0, 0] * (w * y * (1.0 - s) - (1.0 - y) * s),)

    return _make(np.array([[value]]), (logits,), back, "weighted_bce_with_logits")


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Var) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to every tape parameter."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss is not tracked on any tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.tape is None or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.value) if g is None else g
    return out


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failing(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tol]

    def lines(self) -> list[str]:
        width = max((len(k) for k in self.errors), default=0)
        return [
            f"{k:<{width}}  max_rel_err={e:.3e}  {'ok' if e < self.tol else 'FAIL'}"
            for k, e in self.errors.items()
        ]


def relative_error(g_ad, g_fd) -> float:
    g_ad, g_fd = np.asarray(g_ad, dtype=np.float64), np.asarray(g_fd, dtype=np.float64)
    if g_ad.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def gradient_check(
    f: Callable[[Tape, dict], Var],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(tape, p)`` must build a scalar loss from the dict ``p`` of
    :class:`Var` parameters registered on ``tape``.  Any randomness inside
    ``f`` has to be fixed (e.g. a pre-drawn noise sample) for the check to be
    meaningful.  Points sitting exactly on a ReLU kink should be nudged by
    the caller.
    """
    if h <= 0:
        raise InputError("finite-difference step must be positive")
    base = {k: nx.as_dense(v).copy() for k, v in params.items()}

    def evaluate(values) -> float:
        tape = Tape()
        vs = {k: tape.param(k, v) for k, v in values.items()}
        out = f(tape, vs)
        val = out.item()
        if not np.isfinite(val):
            raise NumericError("non-finite loss during gradient check")
        return val

    tape = Tape()
    vs = {k: tape.param(k, v) for k, v in base.items()}
    loss = f(tape, vs)
    if not np.isfinite(loss.item()):
        raise NumericError("non-finite loss during gradient check")
    ad = backward(loss)

    errors = {}
    for name, arr in base.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = evaluate(base)
            arr[idx] = orig - h
            down = evaluate(base)
            arr[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        if not np.all(np.isfinite(ad[name])):
            raise NumericError(f"non-finite analytic gradient for {name}")
        errors[name] = relative_error(ad[name], fd)
    return GradCheckReport(errors, tol)
