"""Forward-mode automatic differentiation and Lie-derivative calculus.

Derivatives are carried by :class:`Dual` numbers. A dual holds a value and
one tangent per seeded direction; values and tangents may be floats, numpy
arrays (one entry per sample point) or lower-level duals, which is how
second and higher derivatives are obtained. Every dual carries an integer
tag identifying the perturbation that created it, so nested
differentiations never confuse their infinitesimals.

The generic math functions in this module (:func:`sqrt`, :func:`sin`, ...)
accept floats, arrays and duals alike. Fields built from them, or from
parsed expressions, can be differentiated to any order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "Dual",
    "ScalarField",
    "VectorField",
    "sqrt",
    "sin",
    "cos",
    "exp",
    "log",
    "angle",
    "min2",
    "max2",
    "where",
    "div",
    "power",
    "base_value",
    "gradient",
    "jacobian",
    "lie_derivative",
    "lie_derivatives",
    "lie_bracket",
    "iterated_ad",
    "MAX_BRACKET_DEPTH",
]

#: Default cap on the bracket depth accepted by :func:`iterated_ad`.
MAX_BRACKET_DEPTH = 2

_tag_counter = itertools.count(1)


class DomainError(ArithmeticError):
    """Raised when a function is evaluated outside its domain.

    ``expr`` names the offending subexpression when the error comes from a
    parsed expression.
    """

    def __init__(self, message: str, expr: str | None = None):
        self.message = message
        self.expr = expr
        super().__init__(message if expr is None else f"{message} in '{expr}'")

    def with_expr(self, expr: str) -> "DomainError":
        if self.expr is not None:
            return self
        return DomainError(self.message, expr)


def _new_tag() -> int:
    return next(_tag_counter)


def _tag(x) -> int:
    return x.tag if isinstance(x, Dual) else 0


class Dual:
    """Dual number ``value + sum_i tangents[i] * eps_i`` for one perturbation tag."""

    __slots__ = ("value", "tangents", "tag")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, tangents: Sequence, tag: int):
        self.value = value
        self.tangents = tuple(tangents)
        self.tag = tag

    def __repr__(self) -> str:
        return f"Dual({self.value!r}, {self.tangents!r}, tag={self.tag})"

    def _chain(self, value, slope) -> "Dual":
        return Dual(value, [slope * t for t in self.tangents], self.tag)

    def _const(self, other) -> bool:
        # True when ``other`` is constant with respect to this perturbation.
        return not isinstance(other, Dual) or other.tag < self.tag

    def __add__(self, other):
        if self._const(other):
            return Dual(self.value + other, self.tangents, self.tag)
        if other.tag > self.tag:
            return other.__radd__(self)
        return Dual(
            self.value + other.value,
            [a + b for a, b in zip(self.tangents, other.tangents)],
            self.tag,
        )

    def __radd__(self, other):
        return Dual(other + self.value, self.tangents, self.tag)

    def __sub__(self, other):
        if self._const(other):
            return Dual(self.value - other, self.tangents, self.tag)
        if other.tag > self.tag:
            return other.__rsub__(self)
        return Dual(
            self.value - other.value,
            [a - b for a, b in zip(self.tangents, other.tangents)],
            self.tag,
        )

    def __rsub__(self, other):
        return Dual(other - self.value, [-t for t in self.tangents], self.tag)

    def __mul__(self, other):
        if self._const(other):
            return Dual(self.value * other, [t * other for t in self.tangents], self.tag)
        if other.tag > self.tag:
            return other.__rmul__(self)
        a, b = self.value, other.value
        return Dual(
            a * b,
            [a * tb + ta * b for ta, tb in zip(self.tangents, other.tangents)],
            self.tag,
        )

    def __rmul__(self, other):
        return Dual(other * self.value, [other * t for t in self.tangents], self.tag)

    def __truediv__(self, other):
        _check_nonzero(other)
        if self._const(other):
            return Dual(self.value / other, [t / other for t in self.tangents], self.tag)
        if other.tag > self.tag:
            return other.__rtruediv__(self)
        b = other.value
        q = self.value / b
        return Dual(
            q,
            [(ta - q * tb) / b for ta, tb in zip(self.tangents, other.tangents)],
            self.tag,
        )

    def __rtruediv__(self, other):
        _check_nonzero(self)
        q = other / self.value
        return Dual(q, [-(q * t) / self.value for t in self.tangents], self.tag)

    def __neg__(self):
        return Dual(-self.value, [-t for t in self.tangents], self.tag)

    def __pos__(self):
        return self

    def __pow__(self, other):
        return power(self, other)

    def __rpow__(self, other):
        return power(other, self)

    # comparisons act on the underlying numbers
    def __lt__(self, other):
        return base_value(self) < base_value(other)

    def __le__(self, other):
        return base_value(self) <= base_value(other)

    def __gt__(self, other):
        return base_value(self) > base_value(other)

    def __ge__(self, other):
        return base_value(self) >= base_value(other)


def base_value(x):
    """Strip every dual layer and return the underlying float or array."""
    while isinstance(x, Dual):
        x = x.value
    return x


def _check_nonzero(x) -> None:
    if np.any(base_value(x) == 0):
        raise DomainError("division by zero")


def sqrt(x):
    if isinstance(x, Dual):
        r = sqrt(x.value)
        if np.any(base_value(r) == 0):
            raise DomainError("derivative of sqrt is unbounded at 0")
        return x._chain(r, 0.5 / r)
    if np.any(np.asarray(x) < 0):
        raise DomainError("sqrt of negative argument")
    return np.sqrt(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.value)
        return x._chain(e, e)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return x._chain(log(x.value), 1.0 / x.value)
    if np.any(np.asarray(x) <= 0):
        raise DomainError("log of nonpositive argument")
    return np.log(x)


def sin(x):
    if isinstance(x, Dual):
        return x._chain(sin(x.value), cos(x.value))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return x._chain(cos(x.value), -sin(x.value))
    return np.cos(x)


def angle(p):
    """The bracket ``<p> = 1 / (2 sqrt(1 + p^2))``; ``|p <p>| < 1/2``."""
    return 1.0 / (2.0 * sqrt(1.0 + p * p))


def div(a, b):
    """Division that raises :class:`DomainError` on a zero denominator."""
    _check_nonzero(b)
    return a / b


def _all_integer(k) -> bool:
    k = np.asarray(base_value(k), dtype=float)
    return bool(np.all(np.mod(k, 1.0) == 0.0))


def power(a, b):
    """``a ** b`` with dual support and domain checking."""
    if not isinstance(b, Dual):
        integral = _all_integer(b)
        if isinstance(a, Dual):
            if np.all(np.asarray(b) == 0):
                return Dual(power(a.value, b), [0.0 * t for t in a.tangents], a.tag)
            if not integral and np.any(base_value(a) <= 0):
                raise DomainError("non-integer power of a nonpositive argument")
            return a._chain(power(a.value, b), b * power(a.value, b - 1))
        av = np.asarray(a, dtype=float)
        if not integral and np.any(av < 0):
            raise DomainError("non-integer power of a negative argument")
        if np.any(np.asarray(b) < 0) and np.any(av == 0):
            raise DomainError("negative power of zero")
        out = np.power(av, b)
        return out[()] if np.ndim(out) == 0 else out
    # variable exponent: a ** b = exp(b log a), requires a > 0
    if np.any(base_value(a) <= 0):
        raise DomainError("variable power of a nonpositive base")
    if isinstance(a, Dual) and a.tag > b.tag:
        val = power(a.value, b)
        return a._chain(val, b * power(a.value, b - 1.0))
    if isinstance(a, Dual) and a.tag == b.tag:
        val = power(a.value, b.value)
        la = log(a.value)
        return Dual(
            val,
            [val * (tb * la + b.value * ta / a.value) for ta, tb in zip(a.tangents, b.tangents)],
            b.tag,
        )
    val = power(a, b.value)
    return b._chain(val, val * log(a))


def _split(x, tag: int, size: int):
    if isinstance(x, Dual) and x.tag == tag:
        return x.value, x.tangents
    return x, (0.0,) * size


def where(cond, a, b):
    """Elementwise selection ``a if cond else b`` that preserves tangents."""
    ta, tb = _tag(a), _tag(b)
    if ta == 0 and tb == 0:
        out = np.where(cond, a, b)
        return out[()] if out.ndim == 0 else out
    tag = max(ta, tb)
    size = len((a if ta == tag else b).tangents)
    av, at = _split(a, tag, size)
    bv, bt = _split(b, tag, size)
    return Dual(where(cond, av, bv), [where(cond, x, y) for x, y in zip(at, bt)], tag)


def min2(a, b):
    return where(base_value(a) <= base_value(b), a, b)


def max2(a, b):
    return where(base_value(a) >= base_value(b), a, b)


# ---------------------------------------------------------------------------
# fields

def _components(x) -> list:
    if isinstance(x, (list, tuple)):
        return list(x)
    arr = np.asarray(x, dtype=float)
    return [arr[i] for i in range(arr.shape[0])]


def _batch_shape(comps) -> tuple:
    shapes = [np.shape(base_value(c)) for c in comps]
    return np.broadcast_shapes(*shapes) if shapes else ()


def _numeric(y, shape):
    if isinstance(y, Dual):
        raise TypeError("numeric evaluation produced a dual number")
    y = np.asarray(y, dtype=float)
    if y.shape != shape:
        y = np.broadcast_to(y, shape).copy()
    return y[()] if y.ndim == 0 else y


class ScalarField:
    """A scalar function on R^n built from generic operations.

    ``fn`` receives a list of ``n`` coordinates (floats, arrays or duals) and
    returns a scalar of the same kind. Calling the field with an array of
    shape ``(n,)`` or ``(n, batch)`` evaluates it numerically.
    """

    def __init__(self, fn: Callable[[list], object], n: int, name: str = ""):
        self.fn = fn
        self.n = n
        self.name = name

    def __repr__(self) -> str:
        return f"ScalarField({self.name or self.fn!r}, n={self.n})"

    def __call__(self, x):
        comps = _components(x)
        if len(comps) != self.n:
            raise ValueError(f"expected state of dimension {self.n}, got {len(comps)}")
        return _numeric(self.fn(comps), _batch_shape(comps))

    def grad(self, x) -> np.ndarray:
        return gradient(self, x)

    @classmethod
    def constant(cls, c: float, n: int) -> "ScalarField":
        return cls(lambda x: c, n, name=repr(c))


class VectorField:
    """A vector field on R^n; ``fn`` maps coordinates to a list of components."""

    def __init__(self, fn: Callable[[list], list], n: int, name: str = "", dim: int | None = None):
        self.fn = fn
        self.n = n
        self.dim = n if dim is None else dim
        self.name = name

    def __repr__(self) -> str:
        return f"VectorField({self.name or self.fn!r}, n={self.n})"

    def __call__(self, x) -> np.ndarray:
        comps = _components(x)
        if len(comps) != self.n:
            raise ValueError(f"expected state of dimension {self.n}, got {len(comps)}")
        shape = _batch_shape(comps)
        return np.stack([np.asarray(_numeric(y, shape)) for y in self.fn(comps)])

    def component(self, i: int) -> ScalarField:
        return ScalarField(lambda x: self.fn(x)[i], self.n, name=f"{self.name}[{i}]")

    @classmethod
    def from_components(cls, comps: Sequence[ScalarField], name: str = "") -> "VectorField":
        n = comps[0].n
        return cls(lambda x: [c.fn(x) for c in comps], n, name=name, dim=len(comps))

    @classmethod
    def zero(cls, n: int) -> "VectorField":
        return cls(lambda x: [0.0] * n, n, name="0")


# ---------------------------------------------------------------------------
# derivatives

def _grad_generic(fn, comps) -> list:
    tag = _new_tag()
    n = len(comps)
    seeds = [Dual(c, [1.0 if j == i else 0.0 for j in range(n)], tag) for i, c in enumerate(comps)]
    y = fn(seeds)
    if isinstance(y, Dual) and y.tag == tag:
        return list(y.tangents)
    return [0.0] * n


def _jvp_generic(fn, comps, direction) -> object:
    tag = _new_tag()
    seeds = [Dual(c, [d], tag) for c, d in zip(comps, direction)]
    y = fn(seeds)
    if isinstance(y, Dual) and y.tag == tag:
        return y.tangents[0]
    return 0.0


def _jvp_vec_generic(fn, comps, direction) -> list:
    tag = _new_tag()
    seeds = [Dual(c, [d], tag) for c, d in zip(comps, direction)]
    out = []
    for y in fn(seeds):
        out.append(y.tangents[0] if isinstance(y, Dual) and y.tag == tag else 0.0)
    return out


def gradient(V: ScalarField, x) -> np.ndarray:
    """Exact gradient of ``V`` at ``x`` (shape ``(n,)`` or ``(n, batch)``)."""
    comps = _components(x)
    shape = _batch_shape(comps)
    return np.stack([np.asarray(_numeric(g, shape)) for g in _grad_generic(V.fn, comps)])


def gradient_field(V: ScalarField) -> VectorField:
    return VectorField(lambda x: _grad_generic(V.fn, x), V.n, name=f"grad {V.name}")


def jacobian(f: VectorField, x) -> np.ndarray:
    """Jacobian ``df_i/dx_j``, shape ``(dim, n)`` or ``(dim, n, batch)``."""
    comps = _components(x)
    shape = _batch_shape(comps)
    cols = []
    for j in range(f.n):
        e = [1.0 if k == j else 0.0 for k in range(f.n)]
        col = _jvp_vec_generic(f.fn, comps, e)
        cols.append(np.stack([np.asarray(_numeric(c, shape)) for c in col]))
    return np.stack(cols, axis=1)


def _check_dims(a, b) -> None:
    if a.n != b.n:
        raise ValueError(f"dimension mismatch: {a.n} vs {b.n}")


def lie_derivative(V: ScalarField, f: VectorField) -> ScalarField:
    """The field ``x -> grad V(x) . f(x)``, itself differentiable."""
    _check_dims(V, f)
    return ScalarField(lambda x: _jvp_generic(V.fn, x, f.fn(x)), V.n, name=f"L_{f.name}{V.name}")


def lie_derivatives(V: ScalarField, columns: Sequence[VectorField]) -> list[ScalarField]:
    """Row of Lie derivatives ``[L_{g_1}V, ..., L_{g_m}V]``."""
    return [lie_derivative(V, g) for g in columns]


def lie_bracket(f: VectorField, g: VectorField) -> VectorField:
    """``[f, g](x) = Dg(x) f(x) - Df(x) g(x)``."""
    _check_dims(f, g)

    def fn(x):
        a = _jvp_vec_generic(g.fn, x, f.fn(x))
        b = _jvp_vec_generic(f.fn, x, g.fn(x))
        return [ai - bi for ai, bi in zip(a, b)]

    return VectorField(fn, f.n, name=f"[{f.name},{g.name}]")


def iterated_ad(f: VectorField, g: VectorField, i: int, max_depth: int = MAX_BRACKET_DEPTH) -> VectorField:
    """``ad_f^i g`` with ``ad_f^0 g = g``.

    Each bracket level adds one derivative order. Nested duals support any
    depth, but the cost grows geometrically, so depths above ``max_depth``
    are rejected unless the caller raises the cap.
    """
    if i < 0:
        raise ValueError("bracket depth must be nonnegative")
    if i > max_depth:
        raise ValueError(f"bracket depth {i} exceeds the supported depth {max_depth}")
    out = g
    for _ in range(i):
        out = lie_bracket(f, out)
    return out
