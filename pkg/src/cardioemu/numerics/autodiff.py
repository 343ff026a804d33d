"""Reverse-mode automatic differentiation on an explicit tape.

Every value on the tape is a node holding a numpy array (0-d for scalars).
Nodes are appended in creation order, which is therefore a topological
order: a node's parents always precede it.  ``Tape.backward`` walks the
node list in reverse, accumulating vector-Jacobian products, so one
backward sweep yields the gradient of a scalar output with respect to
every variable on the tape.

The op functions in this module dispatch on type: given plain numbers or
numpy arrays they evaluate with numpy, given a ``Node`` they record the
operation.  Model code can therefore be written once and used both for
plain inference and for differentiable training.

Matrix factorizations participate through solve-based adjoints
(``cholesky``, ``solve_lower``), which is what lets Gaussian marginal
likelihoods be differentiated with respect to kernel hyperparameters.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from cardioemu.errors import ConfigurationError

__all__ = [
    "Tape",
    "Node",
    "grad",
    "value_of",
    "exp",
    "log",
    "tanh",
    "softplus",
    "sqrt",
    "square",
    "clip",
    "asum",
    "mean",
    "dot",
    "hstack",
    "column",
    "outer_sq_diff",
    "add_diag",
    "diagonal",
    "cholesky",
    "solve_lower",
]


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Node:
    """One entry of the tape: a value plus how to push gradients to parents."""

    __slots__ = ("tape", "index", "value", "op", "parents", "vjp")

    # make numpy defer to the reflected operators below instead of trying
    # to absorb nodes into object arrays
    __array_ufunc__ = None

    def __init__(self, tape, index, value, op, parents, vjp):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents  # tuple of parent Nodes
        self.vjp = vjp  # callable(out_grad) -> tuple of parent grads

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"

    # arithmetic sugar; plain operands are treated as constants
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

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return dot(self, other)


class Tape:
    """Append-only record of a computation, in topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def _record(self, value, op, parents, vjp):
        node = Node(self, len(self.nodes), _as_array(value), op, parents, vjp)
        self.nodes.append(node)
        return node

    def var(self, value):
        """A leaf that participates in gradients."""
        return self._record(value, "var", (), None)

    def const(self, value):
        """A leaf whose gradient is exactly zero."""
        return self._record(value, "const", (), None)

    def backward(self, output):
        """Reverse sweep from a scalar ``output``; returns per-node adjoints.

        The adjoint of ``output`` w.r.t. itself is exactly 1; leaves that
        the output does not depend on get adjoint 0.
        """
        if output.tape is not self:
            raise ConfigurationError("output node belongs to a different tape")
        if output.value.size != 1:
            raise ConfigurationError("backward requires a scalar output")
        grads = [None] * len(self.nodes)
        grads[output.index] = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.op == "const":
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        return grads

    def gradient(self, output, wrt):
        """Gradient of scalar ``output`` w.r.t. each node in ``wrt``."""
        grads = self.backward(output)
        return [
            grads[n.index] if grads[n.index] is not None else np.zeros_like(n.value)
            for n in wrt
        ]


def value_of(x):
    return x.value if isinstance(x, Node) else _as_array(x)


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ConfigurationError("no tape among operands")


def _lift(tape, x):
    return x if isinstance(x, Node) else tape.const(x)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    if not _is_node(a, b):
        return _as_array(a) + _as_array(b)
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return tape._record(value, "add", (a, b), vjp)


def sub(a, b):
    if not _is_node(a, b):
        return _as_array(a) - _as_array(b)
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return tape._record(value, "sub", (a, b), vjp)


def mul(a, b):
    if not _is_node(a, b):
        return _as_array(a) * _as_array(b)
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    value = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return tape._record(value, "mul", (a, b), vjp)


def div(a, b):
    if not _is_node(a, b):
        return _as_array(a) / _as_array(b)
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    value = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return tape._record(value, "div", (a, b), vjp)


def neg(a):
    if not _is_node(a):
        return -_as_array(a)
    tape = a.tape
    return tape._record(-a.value, "neg", (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise ``a**p`` for a constant real exponent ``p``."""
    p = float(p)
    if not _is_node(a):
        return _as_array(a) ** p

    tape = a.tape
    value = a.value**p

    def vjp(g):
        return (g * p * a.value ** (p - 1.0),)

    return tape._record(value, "pow", (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a):
    if not _is_node(a):
        return np.exp(_as_array(a))
    value = np.exp(a.value)
    return a.tape._record(value, "exp", (a,), lambda g: (g * value,))


def log(a):
    if not _is_node(a):
        return np.log(_as_array(a))
    return a.tape._record(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def tanh(a):
    if not _is_node(a):
        return np.tanh(_as_array(a))
    value = np.tanh(a.value)
    return a.tape._record(value, "tanh", (a,), lambda g: (g * (1.0 - value * value),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    """log(1 + exp(a)), computed without overflow."""
    if not _is_node(a):
        return np.logaddexp(0.0, _as_array(a))
    value = np.logaddexp(0.0, a.value)
    return a.tape._record(
        value, "softplus", (a,), lambda g: (g * _sigmoid(np.atleast_1d(a.value)).reshape(a.value.shape),)
    )


def sqrt(a):
    if not _is_node(a):
        return np.sqrt(_as_array(a))
    value = np.sqrt(a.value)
    return a.tape._record(value, "sqrt", (a,), lambda g: (g * 0.5 / value,))


def square(a):
    if not _is_node(a):
        x = _as_array(a)
        return x * x
    return mul(a, a)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly inside the bounds."""
    if not _is_node(a):
        return np.clip(_as_array(a), lo, hi)
    value = np.clip(a.value, lo, hi)
    inside = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return a.tape._record(value, "clip", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def asum(a, axis=None):
    if not _is_node(a):
        return np.sum(_as_array(a), axis=axis)
    value = np.sum(a.value, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.value.shape).copy(),)

    return a.tape._record(value, "sum", (a,), vjp)


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return div(asum(a, axis=axis), float(n))


def column(a, j):
    """Extract column ``j`` of a 2-d value."""
    if not _is_node(a):
        return _as_array(a)[:, j]
    value = a.value[:, j]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, j] = g
        return (out,)

    return a.tape._record(value, "column", (a,), vjp)


def hstack(parts):
    """Concatenate 2-d blocks along columns."""
    if not _is_node(*parts):
        return np.concatenate([_as_array(p) for p in parts], axis=1)
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return tape._record(value, "hstack", tuple(parts), vjp)


def dot(a, b):
    """Inner/matrix product; supports 1d·1d, 2d@2d, 2d@1d, and 1d@2d."""
    if not _is_node(a, b):
        return _as_array(a) @ _as_array(b)
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    value = av @ bv

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return g @ bv.T, np.outer(av, g)
        raise ConfigurationError(
            f"dot: unsupported operand ranks {av.ndim} and {bv.ndim}"
        )

    return tape._record(value, "dot", (a, b), vjp)


# ---------------------------------------------------------------------------
# kernel / linear-algebra primitives


def outer_sq_diff(u):
    """Matrix of squared pairwise differences D[i, j] = (u[i] - u[j])**2."""
    if not _is_node(u):
        uv = _as_array(u)
        d = uv[:, None] - uv[None, :]
        return d * d
    uv = u.value
    d = uv[:, None] - uv[None, :]
    value = d * d

    def vjp(g):
        gs = g + g.T
        return (2.0 * (uv * gs.sum(axis=1) - gs @ uv),)

    return u.tape._record(value, "outer_sq_diff", (u,), vjp)


def add_diag(a, s):
    """A + s*I for square A and scalar s."""
    if not _is_node(a, s):
        av = _as_array(a)
        out = av.copy()
        out[np.diag_indices_from(out)] += float(value_of(s))
        return out
    tape = _tape_of(a, s)
    a, s = _lift(tape, a), _lift(tape, s)
    out = a.value.copy()
    out[np.diag_indices_from(out)] += float(s.value)

    def vjp(g):
        return g, np.trace(g).reshape(s.value.shape)

    return tape._record(out, "add_diag", (a, s), vjp)


def diagonal(a):
    if not _is_node(a):
        return np.diagonal(_as_array(a)).copy()
    value = np.diagonal(a.value).copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        out[np.diag_indices_from(out)] = g
        return (out,)

    return a.tape._record(value, "diagonal", (a,), vjp)


def _phi_lower(m):
    """Lower triangle with the diagonal halved (Cholesky adjoint helper)."""
    out = np.tril(m)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a):
    """Lower-triangular factor of an SPD matrix, with solve-based adjoint.

    Backward rule: with P = Phi(L^T Lbar), the adjoint of A is the
    symmetrization of L^{-T} P L^{-1}, computed by two triangular solves.
    """
    if not _is_node(a):
        return np.linalg.cholesky(_as_array(a))
    lower = np.linalg.cholesky(a.value)

    def vjp(g):
        p = _phi_lower(lower.T @ g)
        x = scipy.linalg.solve_triangular(lower, p, lower=True, trans="T")
        abar = scipy.linalg.solve_triangular(lower, x.T, lower=True, trans="T").T
        return (0.5 * (abar + abar.T),)

    return a.tape._record(lower, "cholesky", (a,), vjp)


def solve_lower(l, b, transposed=False):
    """Solve L x = b (or L^T x = b) for lower-triangular L."""
    trans = "T" if transposed else "N"
    if not _is_node(l, b):
        return scipy.linalg.solve_triangular(_as_array(l), _as_array(b), lower=True, trans=trans)
    tape = _tape_of(l, b)
    l, b = _lift(tape, l), _lift(tape, b)
    x = scipy.linalg.solve_triangular(l.value, b.value, lower=True, trans=trans)

    def vjp(g):
        # adjoint of x = A^{-1} b: bbar = A^{-T} g, Abar = -bbar x^T
        bbar = scipy.linalg.solve_triangular(
            l.value, g, lower=True, trans="N" if transposed else "T"
        )
        if x.ndim == 1:
            outer = np.outer(bbar, x)
        else:
            outer = bbar @ x.T
        lbar = -np.tril(outer.T if transposed else outer)
        return lbar, bbar

    return tape._record(x, "solve_lower", (l, b), vjp)


# ---------------------------------------------------------------------------
# top-level convenience


def grad(f, inputs):
    """Gradient of ``f`` at ``inputs`` via one reverse sweep.

    ``f`` takes a list of scalar nodes and must return a scalar node built
    from the supported ops.
    """
    tape = Tape()
    xs = [tape.var(x) for x in inputs]
    out = f(xs)
    if not isinstance(out, Node):
        raise ConfigurationError("function under grad() must return a tape node")
    return [float(g) for g in tape.gradient(out, xs)]
