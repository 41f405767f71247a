"""Reverse-mode tape with an embedded forward tangent bundle.

A :class:`Tape` is a Wengert list: nodes are appended in evaluation order,
so a single reverse sweep visits each node exactly once and parents always
precede children.  Node values may be scalars or numpy arrays; every
primitive is elementwise over whatever shape it is handed (plus a few
structural ops: matmul, row extraction, axis-0 concatenation/reduction).

:class:`TangentValue` carries a primal together with three directional
derivatives (one per spatial axis).  The tangent coefficients are ordinary
values -- when they are tape nodes, the reverse sweep differentiates them
too, which is how mixed second-order terms (parameter gradients of spatial
Jacobians) come out of a single tape.

The module-level math functions (``sin``, ``mul``, ``matmul``, ...) accept
plain numbers/arrays, :class:`Node` and :class:`TangentValue` operands and
dispatch accordingly, so numerical code can be written once and run either
untaped (fast evaluation) or taped (differentiable).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "TangentValue",
    "GradientMap",
    "DomainError",
    "backward",
    "spatial_jacobian",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sin",
    "cos",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "smooth_abs",
    "atan2",
    "minimum",
    "maximum",
    "matmul",
    "concat0",
    "row",
    "sum0",
    "mean_all",
    "value_of",
    "SMOOTH_ABS_EPS",
]

# Smoothing half-width for the differentiable absolute value.  Intensities
# are normalized to [0,1], so 1e-3 is far below any meaningful residual.
SMOOTH_ABS_EPS = 1.0e-3


class DomainError(ValueError):
    """log/sqrt evaluated outside its domain; carries the offending value."""

    def __init__(self, op, value):
        self.op = op
        self.value = value
        super().__init__(f"{op}: argument out of domain (min offending value {value})")


class Node:
    """One tape entry: a value plus up to two parent links with their VJPs."""

    __slots__ = ("tape", "value", "parents", "idx")

    # keep numpy from absorbing us into elementwise object arrays
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=()):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={np.shape(self.value)})"

    # arithmetic sugar; all dispatch through the module-level functions

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Arena of nodes for one differentiable evaluation.

    ``clear()`` resets the arena between optimizer iterations; the list keeps
    its allocated capacity, so steady-state training does not reallocate.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def leaf(self, value):
        """Put an independent value on the tape (parameter or input)."""
        return Node(self, value)

    # alias kept for readability at call sites that lift non-differentiated data
    constant = leaf

    def record(self, kind, *operands):
        """Record one primitive by name. Supported kinds:

        add, sub, mul, div, neg, sin, cos, tanh, exp, log, sqrt,
        abs-smoothed, atan2, min, max, matmul, concat, row, sum0, mean.
        """
        try:
            fn = _RECORD_TABLE[kind]
        except KeyError:
            raise ValueError(f"unsupported op-kind {kind!r}") from None
        out = fn(*operands)
        if not isinstance(out, Node):
            # all-constant operands: keep the result on the tape anyway
            out = self.leaf(out)
        return out


class GradientMap:
    """Result of a backward sweep; indexable by node."""

    __slots__ = ("_tape", "_grads")

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node):
        if node.tape is not self._tape:
            raise ValueError("node does not belong to the differentiated tape")
        g = self._grads[node.idx]
        if g is None:
            v = np.asarray(node.value)
            if not np.issubdtype(v.dtype, np.floating):
                v = v.astype(float)
            return np.zeros_like(v)
        return g


def backward(tape, output):
    """Reverse-accumulate d(output)/d(node) for every node on the tape.

    ``output`` must be a scalar node of this tape.  Each node is visited
    exactly once, in reverse recording order.
    """
    if not isinstance(output, Node) or output.tape is not tape:
        raise ValueError("output node is not on this tape")
    if np.size(output.value) != 1:
        raise ValueError("backward requires a scalar output node")
    grads = [None] * len(tape.nodes)
    seed = np.asarray(output.value)
    if not np.issubdtype(seed.dtype, np.floating):
        seed = seed.astype(float)
    grads[output.idx] = np.ones_like(seed)
    for node in reversed(tape.nodes):
        g = grads[node.idx]
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            i = parent.idx
            if grads[i] is None:
                grads[i] = contrib
            else:
                grads[i] = grads[i] + contrib
    return GradientMap(tape, grads)


# ---------------------------------------------------------------------------
# dispatch helpers
# ---------------------------------------------------------------------------


def value_of(x):
    """Raw numeric payload of a Node / TangentValue / plain value."""
    if isinstance(x, TangentValue):
        return value_of(x.primal)
    if isinstance(x, Node):
        return x.value
    return x


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _ew_vjp(node, partial):
    shape = np.shape(node.value)
    return node, lambda g: _unbroadcast(g * partial, shape)


def _ident_vjp(node):
    shape = np.shape(node.value)
    return node, lambda g: _unbroadcast(g, shape)


def _neg_vjp(node):
    shape = np.shape(node.value)
    return node, lambda g: _unbroadcast(-g, shape)


def _binary_ew(a, b, fval, da, db):
    """Elementwise binary op; ``da``/``db`` produce the local partials."""
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = fval(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append(_ew_vjp(a, da(av, bv)))
    if isinstance(b, Node):
        parents.append(_ew_vjp(b, db(av, bv)))
    return Node(tape, out, tuple(parents))


def _unary_ew(a, fval, da):
    av = value_of(a)
    out = fval(av)
    if not isinstance(a, Node):
        return out
    return Node(a.tape, out, (_ew_vjp(a, da(av, out)),))


# ---------------------------------------------------------------------------
# elementwise primitives (Node / plain); TangentValue handled at the end
# ---------------------------------------------------------------------------


def add(a, b):
    if isinstance(a, TangentValue) or isinstance(b, TangentValue):
        return TangentValue._add(a, b)
    tape = _tape_of(a, b)
    out = value_of(a) + value_of(b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append(_ident_vjp(a))
    if isinstance(b, Node):
        parents.append(_ident_vjp(b))
    return Node(tape, out, tuple(parents))


def sub(a, b):
    if isinstance(a, TangentValue) or isinstance(b, TangentValue):
        return TangentValue._sub(a, b)
    tape = _tape_of(a, b)
    out = value_of(a) - value_of(b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append(_ident_vjp(a))
    if isinstance(b, Node):
        parents.append(_neg_vjp(b))
    return Node(tape, out, tuple(parents))


def mul(a, b):
    if isinstance(a, TangentValue) or isinstance(b, TangentValue):
        return TangentValue._mul(a, b)
    return _binary_ew(a, b, lambda x, y: x * y, lambda x, y: y, lambda x, y: x)


def div(a, b):
    if isinstance(a, TangentValue) or isinstance(b, TangentValue):
        return TangentValue._div(a, b)
    return _binary_ew(
        a, b, lambda x, y: x / y, lambda x, y: 1.0 / y, lambda x, y: -x / (y * y)
    )


def neg(a):
    if isinstance(a, TangentValue):
        return TangentValue._neg(a)
    return _unary_ew(a, lambda x: -x, lambda x, out: -1.0)


def sin(a):
    if isinstance(a, TangentValue):
        return TangentValue._chain(a, sin, cos)
    return _unary_ew(a, np.sin, lambda x, out: np.cos(x))


def cos(a):
    if isinstance(a, TangentValue):
        return TangentValue._chain(a, cos, lambda p: neg(sin(p)))
    return _unary_ew(a, np.cos, lambda x, out: -np.sin(x))


def tanh(a):
    if isinstance(a, TangentValue):
        t = tanh(a.primal)
        deriv = sub(1.0, mul(t, t))
        return TangentValue(t, tuple(TangentValue._scale(deriv, c) for c in a.tangent))
    return _unary_ew(a, np.tanh, lambda x, out: 1.0 - out * out)


def exp(a):
    if isinstance(a, TangentValue):
        e = exp(a.primal)
        return TangentValue(e, tuple(TangentValue._scale(e, c) for c in a.tangent))
    return _unary_ew(a, np.exp, lambda x, out: out)


def _check_domain(op, v, strict_positive):
    v = np.asarray(v)
    bad = v <= 0 if strict_positive else v < 0
    if np.any(bad):
        raise DomainError(op, float(np.min(v)))


def log(a):
    if isinstance(a, TangentValue):
        _check_domain("log", value_of(a), True)
        out = log(a.primal)
        inv = div(1.0, a.primal)
        return TangentValue(out, tuple(TangentValue._scale(inv, c) for c in a.tangent))
    _check_domain("log", value_of(a), True)
    return _unary_ew(a, np.log, lambda x, out: 1.0 / x)


def sqrt(a):
    if isinstance(a, TangentValue):
        _check_domain("sqrt", value_of(a), True)
        out = sqrt(a.primal)
        half_inv = div(0.5, out)
        return TangentValue(out, tuple(TangentValue._scale(half_inv, c) for c in a.tangent))
    _check_domain("sqrt", value_of(a), True)
    return _unary_ew(a, np.sqrt, lambda x, out: 0.5 / out)


def smooth_abs(a, eps=SMOOTH_ABS_EPS):
    """Differentiable |x|: sqrt(x^2 + eps^2) - eps.

    The -eps offset makes smooth_abs(0) == 0 exactly, so a perfectly aligned
    residual contributes zero loss; the derivative x/sqrt(x^2+eps^2) is the
    same as without the offset.
    """
    if isinstance(a, TangentValue):
        root = sqrt(add(mul(a.primal, a.primal), eps * eps))
        deriv = div(a.primal, root)
        return TangentValue(
            sub(root, eps), tuple(TangentValue._scale(deriv, c) for c in a.tangent)
        )
    if isinstance(a, Node):
        x = a.value
        root = np.sqrt(x * x + eps * eps)
        return Node(a.tape, root - eps, (_ew_vjp(a, x / root),))
    x = np.asarray(a, dtype=float) if not np.isscalar(a) else a
    return np.sqrt(x * x + eps * eps) - eps


def atan2(y, x):
    """Two-argument arctangent, range (-pi, pi].

    At (0,0) the value is 0 and both partials are defined as 0 (the input
    is constant there in every direction that keeps it at the origin).
    """
    if isinstance(y, TangentValue) or isinstance(x, TangentValue):
        return TangentValue._atan2(y, x)
    tape = _tape_of(y, x)
    yv, xv = value_of(y), value_of(x)
    out = np.arctan2(yv, xv)
    if tape is None:
        return out
    denom = xv * xv + yv * yv
    safe = np.where(denom == 0.0, 1.0, denom)
    parents = []
    if isinstance(y, Node):
        parents.append(_ew_vjp(y, np.where(denom == 0.0, 0.0, xv / safe)))
    if isinstance(x, Node):
        parents.append(_ew_vjp(x, np.where(denom == 0.0, 0.0, -yv / safe)))
    return Node(tape, out, tuple(parents))


def _select_ew(a, b, fval, mask_a, mask_b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = fval(av, bv)
    if tape is None:
        return out
    dt = np.asarray(out).dtype
    if not np.issubdtype(dt, np.floating):
        dt = np.float64
    parents = []
    if isinstance(a, Node):
        parents.append(_ew_vjp(a, np.asarray(mask_a(av, bv), dtype=dt)))
    if isinstance(b, Node):
        parents.append(_ew_vjp(b, np.asarray(mask_b(av, bv), dtype=dt)))
    return Node(tape, out, tuple(parents))


def minimum(a, b):
    """Elementwise min; at ties the gradient goes to the first operand."""
    return _select_ew(a, b, np.minimum, lambda x, y: x <= y, lambda x, y: y < x)


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to the first operand."""
    return _select_ew(a, b, np.maximum, lambda x, y: x >= y, lambda x, y: y > x)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    if isinstance(b, TangentValue):
        if isinstance(a, TangentValue):
            raise ValueError("matmul between two tangent bundles is not supported")
        return TangentValue(
            matmul(a, b.primal),
            tuple(None if c is None else matmul(a, c) for c in b.tangent),
        )
    if isinstance(a, TangentValue):
        raise ValueError("tangent bundle on the left of matmul is not supported")
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, bv=bv: g @ bv.T))
    if isinstance(b, Node):
        parents.append((b, lambda g, av=av: av.T @ g))
    return Node(tape, out, tuple(parents))


def concat0(a, b):
    """Concatenate along axis 0 (rows of feature stacks)."""
    if isinstance(a, TangentValue) or isinstance(b, TangentValue):
        return TangentValue._concat0(a, b)
    tape = _tape_of(a, b)
    av, bv = np.asarray(value_of(a)), np.asarray(value_of(b))
    out = np.concatenate([av, bv], axis=0)
    if tape is None:
        return out
    na = av.shape[0]
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, na=na: g[:na]))
    if isinstance(b, Node):
        parents.append((b, lambda g, na=na: g[na:]))
    return Node(tape, out, tuple(parents))


def row(a, i):
    """Extract row ``i`` of a stacked (k, ...) value."""
    if isinstance(a, TangentValue):
        return TangentValue(
            row(a.primal, i),
            tuple(None if c is None else row(c, i) for c in a.tangent),
        )
    if isinstance(a, Node):
        shape = np.shape(a.value)

        def vjp(g, i=i, shape=shape):
            z = np.zeros(shape, dtype=np.asarray(g).dtype)
            z[i] = g
            return z

        return Node(a.tape, a.value[i], ((a, vjp),))
    return np.asarray(a)[i]


def sum0(a):
    """Sum over axis 0: (m, ...) -> (...)."""
    if isinstance(a, TangentValue):
        return TangentValue(
            sum0(a.primal), tuple(None if c is None else sum0(c) for c in a.tangent)
        )
    if isinstance(a, Node):
        shape = np.shape(a.value)
        return Node(
            a.tape,
            np.sum(a.value, axis=0),
            ((a, lambda g, shape=shape: np.broadcast_to(g, shape)),),
        )
    return np.sum(np.asarray(a), axis=0)


def mean_all(a):
    """Mean over every element, producing a scalar."""
    if isinstance(a, Node):
        n = np.size(a.value)
        shape = np.shape(a.value)
        return Node(
            a.tape,
            np.mean(a.value),
            ((a, lambda g, n=n, shape=shape: np.broadcast_to(g / n, shape)),),
        )
    return float(np.mean(np.asarray(value_of(a))))


_RECORD_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "sin": sin,
    "cos": cos,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs-smoothed": smooth_abs,
    "atan2": atan2,
    "min": minimum,
    "max": maximum,
    "minimum": minimum,
    "maximum": maximum,
    "matmul": matmul,
    "concat": concat0,
    "row": row,
    "sum0": sum0,
    "mean": mean_all,
}


# ---------------------------------------------------------------------------
# forward tangent bundle
# ---------------------------------------------------------------------------


class TangentValue:
    """Primal value plus three directional derivatives d/dX_1..3.

    Tangent components may be ``None``, a structural zero; arithmetic skips
    them.  When tangent components are tape nodes, backward() on anything
    computed from them yields mixed second-order derivatives.
    """

    __slots__ = ("primal", "tangent")

    __array_ufunc__ = None

    def __init__(self, primal, tangent):
        if len(tangent) != 3:
            raise ValueError("tangent must carry exactly 3 components")
        self.primal = primal
        self.tangent = tuple(tangent)

    @classmethod
    def seeded(cls, x, scale=None):
        """Lift coordinates (3, ...) with unit (or scaled) basis tangents."""
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(float)
        if x.shape[0] != 3:
            raise ValueError("seeded coordinates must have leading dimension 3")
        seeds = []
        for j in range(3):
            e = np.zeros(x.shape, dtype=x.dtype)
            e[j] = 1.0 if scale is None else scale[j]
            seeds.append(e)
        return cls(x, tuple(seeds))

    @staticmethod
    def _lift(x):
        if isinstance(x, TangentValue):
            return x
        return TangentValue(x, (None, None, None))

    @staticmethod
    def _tadd(a, b):
        if a is None:
            return b
        if b is None:
            return a
        return add(a, b)

    @staticmethod
    def _tsub(a, b):
        if b is None:
            return a
        if a is None:
            return neg(b)
        return sub(a, b)

    @staticmethod
    def _scale(c, t):
        if t is None:
            return None
        return mul(c, t)

    @classmethod
    def _add(cls, a, b):
        a, b = cls._lift(a), cls._lift(b)
        return cls(
            add(a.primal, b.primal),
            tuple(cls._tadd(ta, tb) for ta, tb in zip(a.tangent, b.tangent)),
        )

    @classmethod
    def _sub(cls, a, b):
        a, b = cls._lift(a), cls._lift(b)
        return cls(
            sub(a.primal, b.primal),
            tuple(cls._tsub(ta, tb) for ta, tb in zip(a.tangent, b.tangent)),
        )

    @classmethod
    def _mul(cls, a, b):
        a, b = cls._lift(a), cls._lift(b)
        out = []
        for ta, tb in zip(a.tangent, b.tangent):
            out.append(cls._tadd(cls._scale(b.primal, ta), cls._scale(a.primal, tb)))
        return cls(mul(a.primal, b.primal), tuple(out))

    @classmethod
    def _div(cls, a, b):
        a, b = cls._lift(a), cls._lift(b)
        q = div(a.primal, b.primal)
        out = []
        for ta, tb in zip(a.tangent, b.tangent):
            num = cls._tsub(ta, cls._scale(q, tb))
            out.append(None if num is None else div(num, b.primal))
        return cls(q, tuple(out))

    @classmethod
    def _neg(cls, a):
        return cls(
            neg(a.primal), tuple(None if c is None else neg(c) for c in a.tangent)
        )

    @classmethod
    def _chain(cls, a, f, fprime):
        d = fprime(a.primal)
        return cls(f(a.primal), tuple(cls._scale(d, c) for c in a.tangent))

    @classmethod
    def _atan2(cls, y, x):
        y, x = cls._lift(y), cls._lift(x)
        out = atan2(y.primal, x.primal)
        denom = add(mul(x.primal, x.primal), mul(y.primal, y.primal))
        tans = []
        for ty, tx in zip(y.tangent, x.tangent):
            num = cls._tsub(cls._scale(x.primal, ty), cls._scale(y.primal, tx))
            tans.append(None if num is None else div(num, denom))
        return cls(out, tuple(tans))

    @classmethod
    def _concat0(cls, a, b):
        a, b = cls._lift(a), cls._lift(b)
        tans = []
        for ta, tb in zip(a.tangent, b.tangent):
            if ta is None and tb is None:
                tans.append(None)
                continue
            if ta is None:
                ta = np.zeros_like(np.asarray(value_of(a.primal)))
            if tb is None:
                tb = np.zeros_like(np.asarray(value_of(b.primal)))
            tans.append(concat0(ta, tb))
        return cls(concat0(a.primal, b.primal), tuple(tans))

    def tangent_or_zero(self, j):
        t = self.tangent[j]
        if t is None:
            return np.zeros_like(np.asarray(value_of(self.primal)))
        return t

    # operator sugar

    def __add__(self, other):
        return TangentValue._add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return TangentValue._sub(self, other)

    def __rsub__(self, other):
        return TangentValue._sub(other, self)

    def __mul__(self, other):
        return TangentValue._mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return TangentValue._div(self, other)

    def __rtruediv__(self, other):
        return TangentValue._div(other, self)

    def __neg__(self):
        return TangentValue._neg(self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"TangentValue(primal={self.primal!r})"


def spatial_jacobian(f, x, scale=None):
    """3x3 Jacobian of ``f`` at coordinates ``x`` via seeded tangents.

    ``f`` maps a TangentValue with (3, ...) primal to one of the same
    leading shape; entry (i, j) of the result is df_i/dx_j.  When ``f``
    internally uses tape nodes, each entry is itself differentiable.
    """
    out = f(TangentValue.seeded(x, scale=scale))
    if not isinstance(out, TangentValue):
        raise ValueError("function must return a TangentValue")
    return [[row(out.tangent_or_zero(j), i) for j in range(3)] for i in range(3)]
