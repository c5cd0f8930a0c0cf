"""Nested forward/reverse automatic differentiation on scalar kernels.

Kernels are plain Python callables mapping a list of inputs to a list of
outputs, written with the operations exported here (``exp``, ``log``,
``sin``, ``cos``, ``power``, ``dot``) and the arithmetic operators.  Each
input may be a float or a numpy array; arrays are treated as a batch of
independent scalar evaluations (one lane per quadrature point, say), so a
single call differentiates a whole mesh worth of local kernels.

Forward mode wraps values in :class:`Dual`; reverse mode records a fresh
:class:`Trace` per call.  Both are written against the same generic
operations, so they nest: forward-over-reverse, reverse-over-forward and
reverse-over-reverse all fall out of composing :func:`jvp` and :func:`vjp`.

Example
-------
>>> f = KernelFunction(1, 1, lambda x: [x[0] ** 3])
>>> jvp(f, [2.0], [1.0])
array([12.])
>>> compose_second_order(f, [2.0], "rev-over-fwd", [1.0], [1.0])
array([12.])
"""
from __future__ import annotations

import operator
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "NestingError",
    "UnsupportedModeError",
    "Dual",
    "Var",
    "Trace",
    "KernelFunction",
    "MODES",
    "DEFAULT_MODE",
    "exp",
    "log",
    "sin",
    "cos",
    "power",
    "dot",
    "jvp",
    "vjp",
    "compose_second_order",
]

MODES = ("fwd-over-rev", "rev-over-fwd", "rev-over-rev")
DEFAULT_MODE = "rev-over-fwd"
MAX_DEPTH = 2


class DomainError(ValueError):
    """A partial operation (log, division) was evaluated outside its domain."""


class NestingError(RuntimeError):
    pass


class UnsupportedModeError(ValueError):
    pass


# Structural zero for tangents of constants; compared by identity.
_ZERO = 0.0

_local = threading.local()


def _depth() -> int:
    return getattr(_local, "depth", 0)


class _Level:
    """Context manager that opens one differentiation level on this thread."""

    def __enter__(self) -> int:
        d = _depth() + 1
        if d > MAX_DEPTH:
            raise NestingError(f"nesting depth {d} exceeds {MAX_DEPTH}")
        _local.depth = d
        return d

    def __exit__(self, *exc) -> None:
        _local.depth -= 1


def _level_of(x) -> int:
    return x.level if isinstance(x, (Dual, Var)) else 0


# ---------------------------------------------------------------------------
# Primitive operations on plain values (floats / arrays).


def _plain_div(a, b):
    if np.any(np.asarray(b) == 0):
        raise DomainError("division by zero")
    return a / b


def _plain_log(a):
    if np.any(np.asarray(a) <= 0):
        raise DomainError("log of non-positive value")
    return np.log(a)


def _plain_pow(a, n):
    if n < 0 and np.any(np.asarray(a) == 0):
        raise DomainError("negative power of zero")
    if not float(n).is_integer() and np.any(np.asarray(a) < 0):
        raise DomainError("fractional power of negative value")
    return a**n


def exp(x):
    return x._exp() if isinstance(x, (Dual, Var)) else np.exp(x)


def log(x):
    return x._log() if isinstance(x, (Dual, Var)) else _plain_log(x)


def sin(x):
    return x._sin() if isinstance(x, (Dual, Var)) else np.sin(x)


def cos(x):
    return x._cos() if isinstance(x, (Dual, Var)) else np.cos(x)


def power(x, n):
    """``x ** n`` for a constant real exponent ``n``."""
    if isinstance(n, (Dual, Var)):
        raise TypeError("power() supports constant exponents only")
    return x._pow(n) if isinstance(x, (Dual, Var)) else _plain_pow(x, n)


def dot(a: Sequence, b: Sequence):
    """Inner product of two equal-length sequences of scalars."""
    if len(a) != len(b):
        raise ValueError("dot() operands differ in length")
    out = a[0] * b[0]
    for ai, bi in zip(a[1:], b[1:]):
        out = out + ai * bi
    return out


def _div(a, b):
    if isinstance(a, (Dual, Var)) or isinstance(b, (Dual, Var)):
        return a / b
    return _plain_div(a, b)


# ---------------------------------------------------------------------------
# Forward mode.


class Dual:
    """Primal value paired with a tangent; ``level`` tags the owning jvp."""

    __slots__ = ("primal", "tangent", "level")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, primal, tangent, level: int):
        self.primal = primal
        self.tangent = tangent
        self.level = level

    def __repr__(self) -> str:
        return f"Dual({self.primal!r}, {self.tangent!r}, level={self.level})"

    def _split(self, other):
        if isinstance(other, Dual) and other.level == self.level:
            return other.primal, other.tangent
        return other, _ZERO

    def _defer(self, other) -> bool:
        return _level_of(other) > self.level

    def __add__(self, other):
        if self._defer(other):
            return NotImplemented
        op, ot = self._split(other)
        if ot is _ZERO:
            return Dual(self.primal + op, self.tangent, self.level)
        return Dual(self.primal + op, self.tangent + ot, self.level)

    __radd__ = __add__

    def __sub__(self, other):
        if self._defer(other):
            return NotImplemented
        op, ot = self._split(other)
        if ot is _ZERO:
            return Dual(self.primal - op, self.tangent, self.level)
        return Dual(self.primal - op, self.tangent - ot, self.level)

    def __rsub__(self, other):
        if self._defer(other):
            return NotImplemented
        return Dual(other - self.primal, -self.tangent, self.level)

    def __mul__(self, other):
        if self._defer(other):
            return NotImplemented
        op, ot = self._split(other)
        t = self.tangent * op
        if ot is not _ZERO:
            t = t + self.primal * ot
        return Dual(self.primal * op, t, self.level)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if self._defer(other):
            return NotImplemented
        op, ot = self._split(other)
        q = _div(self.primal, op)
        if ot is _ZERO:
            return Dual(q, _div(self.tangent, op), self.level)
        return Dual(q, _div(self.tangent - q * ot, op), self.level)

    def __rtruediv__(self, other):
        if self._defer(other):
            return NotImplemented
        q = _div(other, self.primal)
        return Dual(q, _div(-q * self.tangent, self.primal), self.level)

    def __neg__(self):
        return Dual(-self.primal, -self.tangent, self.level)

    def __pos__(self):
        return self

    def __pow__(self, n):
        return self._pow(n)

    def _exp(self):
        e = exp(self.primal)
        return Dual(e, e * self.tangent, self.level)

    def _log(self):
        return Dual(log(self.primal), _div(self.tangent, self.primal), self.level)

    def _sin(self):
        return Dual(sin(self.primal), cos(self.primal) * self.tangent, self.level)

    def _cos(self):
        return Dual(cos(self.primal), -sin(self.primal) * self.tangent, self.level)

    def _pow(self, n):
        if isinstance(n, (Dual, Var)):
            raise TypeError("power() supports constant exponents only")
        if n == 0:
            return Dual(power(self.primal, 0), self.tangent * 0.0, self.level)
        d = n * power(self.primal, n - 1)
        return Dual(power(self.primal, n), d * self.tangent, self.level)


# ---------------------------------------------------------------------------
# Reverse mode.

_PRIMITIVES: dict[str, Callable] = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": _div,
    "neg": operator.neg,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "pow": power,
}


class Trace:
    """Wengert list recorded during one reverse-mode call.

    ``nodes`` holds ``(kind, operands, value, param)`` tuples in evaluation
    order, so operand indices always precede their consumer.
    """

    def __init__(self, level: int):
        self.level = level
        self.nodes: list[tuple] = []
        self.inputs: list[int] = []
        self.outputs: list[int] = []

    def _push(self, kind, operands, value, param=None) -> "Var":
        self.nodes.append((kind, operands, value, param))
        return Var(self, len(self.nodes) - 1, value)

    def input(self, value) -> "Var":
        v = self._push("input", (), value)
        self.inputs.append(v.index)
        return v

    def _index(self, x) -> int:
        if isinstance(x, Var):
            if x.trace is not self:
                raise RuntimeError("operand belongs to a different trace")
            return x.index
        return self._push("const", (), x).index

    def apply(self, kind: str, args: tuple, param=None) -> "Var":
        idx = tuple(self._index(a) for a in args)
        vals = [self.nodes[i][2] for i in idx]
        if param is None:
            value = _PRIMITIVES[kind](*vals)
        else:
            value = _PRIMITIVES[kind](*vals, param)
        return self._push(kind, idx, value, param)

    def replay(self, inputs: Sequence):
        """Re-evaluate the recorded program on new input values."""
        if len(inputs) != len(self.inputs):
            raise ValueError("wrong number of inputs for replay")
        vals: list = [None] * len(self.nodes)
        feed = dict(zip(self.inputs, inputs))
        for i, (kind, operands, value, param) in enumerate(self.nodes):
            if kind == "input":
                vals[i] = feed[i]
            elif kind == "const":
                vals[i] = value
            else:
                args = [vals[j] for j in operands]
                f = _PRIMITIVES[kind]
                vals[i] = f(*args) if param is None else f(*args, param)
        return [vals[i] for i in self.outputs]

    def backward(self, cotangents: dict[int, object]) -> list:
        """Reverse sweep; returns the adjoint of every node (None if unreached)."""
        nodes = self.nodes
        adj: list = [None] * len(nodes)
        for i, c in cotangents.items():
            adj[i] = c if adj[i] is None else adj[i] + c

        def acc(j, g):
            adj[j] = g if adj[j] is None else adj[j] + g

        for i in range(len(nodes) - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            kind, ops, value, param = nodes[i]
            if kind in ("input", "const"):
                continue
            if kind == "add":
                acc(ops[0], g)
                acc(ops[1], g)
            elif kind == "sub":
                acc(ops[0], g)
                acc(ops[1], -g)
            elif kind == "mul":
                acc(ops[0], g * nodes[ops[1]][2])
                acc(ops[1], g * nodes[ops[0]][2])
            elif kind == "div":
                b = nodes[ops[1]][2]
                acc(ops[0], _div(g, b))
                acc(ops[1], -_div(g * value, b))
            elif kind == "neg":
                acc(ops[0], -g)
            elif kind == "exp":
                acc(ops[0], g * value)
            elif kind == "log":
                acc(ops[0], _div(g, nodes[ops[0]][2]))
            elif kind == "sin":
                acc(ops[0], g * cos(nodes[ops[0]][2]))
            elif kind == "cos":
                acc(ops[0], -g * sin(nodes[ops[0]][2]))
            elif kind == "pow":
                a = nodes[ops[0]][2]
                acc(ops[0], g * (param * power(a, param - 1)))
            else:  # pragma: no cover
                raise AssertionError(kind)
        return adj


class Var:
    """Handle to a node of a :class:`Trace`."""

    __slots__ = ("trace", "index", "value")
    __array_ufunc__ = None

    def __init__(self, trace: Trace, index: int, value):
        self.trace = trace
        self.index = index
        self.value = value

    @property
    def level(self) -> int:
        return self.trace.level

    def __repr__(self) -> str:
        return f"Var(#{self.index}, {self.value!r}, level={self.level})"

    def _bin(self, kind, a, b):
        if _level_of(a) > self.level or _level_of(b) > self.level:
            return NotImplemented
        return self.trace.apply(kind, (a, b))

    def __add__(self, o):
        return self._bin("add", self, o)

    def __radd__(self, o):
        return self._bin("add", o, self)

    def __sub__(self, o):
        return self._bin("sub", self, o)

    def __rsub__(self, o):
        return self._bin("sub", o, self)

    def __mul__(self, o):
        return self._bin("mul", self, o)

    def __rmul__(self, o):
        return self._bin("mul", o, self)

    def __truediv__(self, o):
        return self._bin("div", self, o)

    def __rtruediv__(self, o):
        return self._bin("div", o, self)

    def __neg__(self):
        return self.trace.apply("neg", (self,))

    def __pos__(self):
        return self

    def __pow__(self, n):
        return self._pow(n)

    def _exp(self):
        return self.trace.apply("exp", (self,))

    def _log(self):
        return self.trace.apply("log", (self,))

    def _sin(self):
        return self.trace.apply("sin", (self,))

    def _cos(self):
        return self.trace.apply("cos", (self,))

    def _pow(self, n):
        if isinstance(n, (Dual, Var)):
            raise TypeError("power() supports constant exponents only")
        return self.trace.apply("pow", (self,), param=n)


# ---------------------------------------------------------------------------
# Transforms on list-in / list-out callables.


def _zero_like(x):
    if isinstance(x, (Dual, Var)):
        return _ZERO
    return np.zeros(np.shape(x))


def _jvp(fn: Callable, xs: list, vs: list) -> list:
    with _Level() as level:
        duals = [Dual(x, v, level) for x, v in zip(xs, vs)]
        outs = fn(duals)
        res = []
        for o in outs:
            if isinstance(o, Dual) and o.level == level:
                res.append(o.tangent)
            else:
                res.append(_zero_like(o))
        return res


def _vjp(fn: Callable, xs: list, ws: list) -> list:
    with _Level() as level:
        trace = Trace(level)
        ins = [trace.input(x) for x in xs]
        outs = fn(ins)
        if len(outs) != len(ws):
            raise ValueError("cotangent length does not match kernel outputs")
        seeds: dict[int, object] = {}
        for o, w in zip(outs, ws):
            if isinstance(o, Var) and o.trace is trace:
                trace.outputs.append(o.index)
                seeds[o.index] = w if o.index not in seeds else seeds[o.index] + w
        adj = trace.backward(seeds)
        return [adj[v.index] if adj[v.index] is not None else _zero_like(x)
                for v, x in zip(ins, xs)]


def _unpack(x) -> list:
    if isinstance(x, np.ndarray):
        return [x[i] for i in range(x.shape[0])] if x.ndim else [x[()]]
    return list(x)


def _pack(values: list, like: list):
    if any(isinstance(v, (Dual, Var)) for v in values):
        return values
    shape = np.broadcast_shapes(*(np.shape(v) for v in list(like) + list(values)))
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), shape)
                     for v in values]) if values else np.zeros((0,) + shape)


@dataclass(frozen=True)
class KernelFunction:
    """A map from ``arity_in`` scalars to ``arity_out`` scalars.

    ``fn`` receives a list of inputs and returns a sequence of outputs.  It
    must be built from the operations of this module so every AD mode can
    propagate through it.
    """

    arity_in: int
    arity_out: int
    fn: Callable[[list], Sequence]

    def __call__(self, x):
        xs = _unpack(x)
        self._check(xs, self.arity_in, "input")
        return _pack(list(self.fn(xs)), xs)

    def _check(self, seq, n, what):
        if len(seq) != n:
            raise ValueError(f"expected {n} {what} components, got {len(seq)}")


def jvp(f: KernelFunction, x, v_t):
    """Jacobian-vector product ``(df/dx) v_t`` in one forward pass."""
    xs, vs = _unpack(x), _unpack(v_t)
    f._check(xs, f.arity_in, "input")
    f._check(vs, f.arity_in, "tangent")
    return _pack(_jvp(f.fn, xs, vs), xs)


def vjp(f: KernelFunction, x, v_c):
    """Vector-Jacobian product ``v_c^T (df/dx)`` by one reverse sweep."""
    xs, ws = _unpack(x), _unpack(v_c)
    f._check(xs, f.arity_in, "input")
    f._check(ws, f.arity_out, "cotangent")
    return _pack(_vjp(f.fn, xs, ws), xs)


def _second(fn, xs, ws, vs, mode):
    if mode == "fwd-over-rev":
        return _jvp(lambda z: _vjp(fn, z, ws), xs, vs)
    if mode == "rev-over-fwd":
        return _vjp(lambda z: _jvp(fn, z, vs), xs, ws)
    if mode == "rev-over-rev":
        return _vjp(lambda z: _vjp(fn, z, ws), xs, vs)
    raise UnsupportedModeError(f"unknown composition mode {mode!r}; expected one of {MODES}")


def compose_second_order(f: KernelFunction, x, mode: str = DEFAULT_MODE, left=None, right=None):
    """Second-order directional derivative by nesting jvp/vjp.

    With ``left`` a cotangent on the outputs (length ``arity_out``) and
    ``right`` a tangent on the inputs, returns ``d/dx [left^T J(x) right]``,
    a vector of length ``arity_in``.  For scalar-output kernels ``left`` may
    instead be an input direction; the result is then ``[left^T H right]``.
    """
    if mode not in MODES:
        raise UnsupportedModeError(f"unknown composition mode {mode!r}; expected one of {MODES}")
    xs, ls, rs = _unpack(x), _unpack(left), _unpack(right)
    f._check(xs, f.arity_in, "input")
    f._check(rs, f.arity_in, "tangent")
    if len(ls) == f.arity_out:
        return _pack(_second(f.fn, xs, ls, rs, mode), xs)
    if f.arity_out == 1 and len(ls) == f.arity_in:
        ones = [np.ones(np.shape(xs[0]))]
        hv = _second(f.fn, xs, ones, rs, mode)
        return _pack([dot(ls, hv)], xs)
    raise ValueError("left direction matches neither the outputs nor the inputs")
