"""Minimal reverse-mode differentiation tape over numpy arrays.

Every operation here accepts either plain numpy values (floats / ndarrays)
or :class:`Var` nodes.  With plain values it just computes numpy results;
with ``Var`` operands it appends a node to the owning :class:`Tape` so a
later :func:`backward` pass can accumulate gradients.  The primitive set is
deliberately small: arithmetic, exp/log/power, softplus, erfinv, clamping,
axis sums, matmul/transpose and basic indexing are all the models need.

A tape is built fresh for each forward pass and never shared between
threads.  Creation order is a topological order, so the backward pass is a
single reverse sweep.
"""

from __future__ import annotations

import numpy as np
from scipy import special


class UsageError(Exception):
    """A caller violated an interface contract (shapes, node kinds, ...)."""


class Tape:
    """Append-only record of primitive operations for one forward pass.

    Leaves created with :meth:`leaf` are the differentiation targets;
    :meth:`backward` returns one gradient per registered leaf, in
    registration order.
    """

    __slots__ = ("nodes", "leaves")

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value, register: bool = True) -> "Var":
        v = Var(self, np.asarray(value, dtype=np.float64))
        if register:
            self.leaves.append(v)
        return v

    def constant(self, value) -> "Var":
        """A node that participates in the graph but is not differentiated."""
        return Var(self, np.asarray(value, dtype=np.float64))

    def backward(self, root: "Var") -> list[np.ndarray]:
        return backward(self, root)


class Var:
    """One node on a tape: a value plus vjp links to its operands."""

    __slots__ = ("tape", "value", "parents", "vjps", "grad", "pos")

    def __init__(self, tape: Tape, value, parents=(), vjps=()):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.grad = None
        self.pos = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def size(self):
        return np.size(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape})"

    # arithmetic sugar; all dispatch through the module-level ops
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    """The plain numpy value behind ``x`` (identity for non-Vars)."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UsageError("operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if np.shape(grad) == tuple(shape):
        return grad
    grad = np.asarray(grad)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape: Tape, root: Var) -> list[np.ndarray]:
    """Reverse sweep from a scalar root; returns gradients of the leaves.

    Gradients are also left on each node's ``.grad`` so intermediate
    sensitivities can be inspected.  The tape stays valid for further
    forward computation afterwards.
    """
    if not isinstance(root, Var):
        raise UsageError("backward root must be a Var")
    if root.tape is not tape:
        raise UsageError("root does not belong to this tape")
    if np.size(root.value) != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.shape}")
    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones_like(root.value, dtype=np.float64)
    for node in reversed(tape.nodes[: root.pos + 1]):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + contrib
    out = []
    for leaf in tape.leaves:
        if leaf.grad is None:
            out.append(np.zeros_like(np.asarray(leaf.value, dtype=np.float64)))
        else:
            out.append(np.asarray(leaf.grad, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g, s=np.shape(av): _unbroadcast(g, s))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g, s=np.shape(bv): _unbroadcast(g, s))
    return Var(tape, out, tuple(parents), tuple(vjps))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g, s=np.shape(av): _unbroadcast(g, s))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g, s=np.shape(bv): _unbroadcast(-g, s))
    return Var(tape, out, tuple(parents), tuple(vjps))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=np.shape(av): _unbroadcast(g * o, s))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g, o=av, s=np.shape(bv): _unbroadcast(g * o, s))
    return Var(tape, out, tuple(parents), tuple(vjps))


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g, o=bv, s=np.shape(av): _unbroadcast(g / o, s))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(
            lambda g, n=av, o=bv, s=np.shape(bv): _unbroadcast(-g * n / (o * o), s)
        )
    return Var(tape, out, tuple(parents), tuple(vjps))


def neg(a):
    if not isinstance(a, Var):
        return -a
    return Var(a.tape, -a.value, (a,), (lambda g: -g,))


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    if not isinstance(a, Var):
        return out
    return Var(a.tape, out, (a,), (lambda g, o=out: g * o,))


def log(a):
    av = value_of(a)
    out = np.log(av)
    if not isinstance(a, Var):
        return out
    return Var(a.tape, out, (a,), (lambda g, x=av: g / x,))


def power(a, p):
    """Elementwise ``a ** p`` for a constant exponent ``p``."""
    av = value_of(a)
    out = av**p
    if not isinstance(a, Var):
        return out
    return Var(a.tape, out, (a,), (lambda g, x=av: g * p * x ** (p - 1),))


def sqrt(a):
    return power(a, 0.5)


def _softplus_value(x):
    # max(x, 0) + log1p(exp(-|x|)) never overflows and is exact for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    """ln(1 + e^x), overflow-safe; derivative is the logistic sigmoid."""
    av = np.asarray(value_of(a), dtype=np.float64)
    out = _softplus_value(av)
    if not isinstance(a, Var):
        return out if out.ndim else float(out)
    return Var(a.tape, out, (a,), (lambda g, x=av: g * _sigmoid(x),))


def erfinv(a):
    av = value_of(a)
    out = special.erfinv(av)
    if not isinstance(a, Var):
        return out
    # d/dx erfinv(x) = sqrt(pi)/2 * exp(erfinv(x)^2)
    return Var(
        a.tape, out, (a,), (lambda g, o=out: g * (np.sqrt(np.pi) / 2.0) * np.exp(o * o),)
    )


def clamp_min(a, floor: float):
    """max(a, floor); gradient passes only where the input is above the floor."""
    av = value_of(a)
    out = np.maximum(av, floor)
    if not isinstance(a, Var):
        return out
    mask = np.asarray(av) > floor
    return Var(a.tape, out, (a,), (lambda g, m=mask: g * m,))


def vsum(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not isinstance(a, Var):
        return out

    shape = np.shape(av)

    def vjp(g, shape=shape, axis=axis, keepdims=keepdims):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Var(a.tape, out, (a,), (vjp,))


def vmean(a, axis=None):
    av = value_of(a)
    n = np.size(av) if axis is None else np.shape(av)[axis]
    return div(vsum(a, axis=axis), float(n))


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if tape is None:
        return out
    # promote vector operands so the standard matrix vjps apply
    a_vec = np.ndim(av) == 1
    b_vec = np.ndim(bv) == 1
    a2 = av[None, :] if a_vec else av
    b2 = bv[:, None] if b_vec else bv

    def expand(g):
        g = np.asarray(g)
        if a_vec:
            g = g[..., None, :] if not b_vec else g[..., None, None]
        elif b_vec:
            g = g[..., :, None]
        return g

    parents, vjps = [], []
    if isinstance(a, Var):

        def vjp_a(g, o=b2, s=np.shape(av)):
            ga = expand(g) @ np.swapaxes(o, -1, -2)
            if a_vec:
                ga = np.squeeze(ga, axis=-2)
            return _unbroadcast(ga, s)

        parents.append(a)
        vjps.append(vjp_a)
    if isinstance(b, Var):

        def vjp_b(g, o=a2, s=np.shape(bv)):
            gb = np.swapaxes(o, -1, -2) @ expand(g)
            if b_vec:
                gb = np.squeeze(gb, axis=-1)
            return _unbroadcast(gb, s)

        parents.append(b)
        vjps.append(vjp_b)
    return Var(tape, out, tuple(parents), tuple(vjps))


def transpose(a, axes=None):
    av = value_of(a)
    out = np.transpose(av, axes)
    if not isinstance(a, Var):
        return out
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return Var(a.tape, out, (a,), (lambda g, inv=inv: np.transpose(g, inv),))


def take(a, key):
    """Basic indexing/slicing; the vjp scatters into a zero array."""
    av = value_of(a)
    out = av[key]
    if not isinstance(a, Var):
        return out

    def vjp(g, key=key, shape=np.shape(av)):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, key, g)
        return full

    return Var(a.tape, out, (a,), (vjp,))


def reshape(a, shape):
    av = value_of(a)
    out = np.reshape(av, shape)
    if not isinstance(a, Var):
        return out
    return Var(a.tape, out, (a,), (lambda g, s=np.shape(av): np.reshape(g, s),))


def stack(items, axis: int = 0):
    """np.stack over a sequence of same-shaped values and/or Vars."""
    values = [value_of(it) for it in items]
    out = np.stack(values, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    parents, vjps = [], []
    for i, item in enumerate(items):
        if isinstance(item, Var):
            parents.append(item)
            vjps.append(lambda g, i=i: np.take(g, i, axis=axis))
    return Var(tape, out, tuple(parents), tuple(vjps))
