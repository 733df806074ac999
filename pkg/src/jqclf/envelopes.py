"""One-variable monotone envelopes and cumulative integrals.

A :class:`MonotoneEnvelope` is tabulated on a grid ``0 = s_0 < ... < s_K``
and evaluated by monotone piecewise-cubic Hermite interpolation, so it is
C^1, it never overshoots the tabulated values between two breakpoints, and
it inherits the monotonicity of the table. On ``[0, s_1]`` an envelope may
use a power law ``y_1 (s / s_1)^p`` instead, which keeps envelopes such as
``alpha_1`` honest close to the origin where no samples exist. Beyond the
last breakpoint the envelope continues linearly or stays constant.

Envelopes accept floats, arrays and dual numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .fields import Dual, base_value

__all__ = [
    "MonotoneEnvelope",
    "Univariate",
    "CumulativeIntegral",
    "band_extrema",
    "nondecreasing_majorant",
    "nondecreasing_minorant",
    "nonincreasing_minorant",
    "nonincreasing_majorant",
    "strictly_increasing",
    "estimate_power",
    "GL_NODES",
]

_MONO = ("nondecreasing", "nonincreasing", "none")
_GL_ORDER = 20
_gl_x, _gl_w = np.polynomial.legendre.leggauss(_GL_ORDER)
#: Gauss-Legendre nodes and weights mapped to [0, 1].
GL_NODES = (0.5 * (_gl_x + 1.0), 0.5 * _gl_w)


def nondecreasing_majorant(y) -> np.ndarray:
    """Smallest nondecreasing sequence above ``y`` (running maximum)."""
    return np.maximum.accumulate(np.asarray(y, dtype=float))


def nondecreasing_minorant(y) -> np.ndarray:
    """Largest nondecreasing sequence below ``y`` (running minimum from the right)."""
    y = np.asarray(y, dtype=float)
    return np.minimum.accumulate(y[::-1])[::-1]


def nonincreasing_minorant(y) -> np.ndarray:
    """Largest nonincreasing sequence below ``y`` (running minimum)."""
    return np.minimum.accumulate(np.asarray(y, dtype=float))


def nonincreasing_majorant(y) -> np.ndarray:
    """Smallest nonincreasing sequence above ``y`` (running maximum from the right)."""
    y = np.asarray(y, dtype=float)
    return np.maximum.accumulate(y[::-1])[::-1]


def strictly_increasing(y, rel: float = 1e-9, lower: bool = True) -> np.ndarray:
    """Break ties in a nondecreasing table so it becomes strictly increasing.

    Lower envelopes are nudged down (walking from the right), upper ones up.
    """
    y = np.array(y, dtype=float)
    if lower:
        for k in range(len(y) - 2, -1, -1):
            if y[k] >= y[k + 1]:
                y[k] = y[k + 1] * (1.0 - rel) if y[k + 1] > 0 else y[k + 1] - rel
    else:
        for k in range(1, len(y)):
            if y[k] <= y[k - 1]:
                y[k] = y[k - 1] * (1.0 + rel) + rel * (y[k - 1] == 0)
    return y


def estimate_power(s, y, lower: bool = True, count: int = 3) -> float:
    """Exponent of a power law ``y ~ s^p`` near the origin, rounded conservatively.

    Lower envelopes get a steeper exponent (smaller near 0), upper envelopes
    a flatter one.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = (s > 0) & (y > 0)
    s, y = s[mask][:count], y[mask][:count]
    if len(s) < 2:
        return 2.0 if lower else 1.0
    k = np.polyfit(np.log(s), np.log(y), 1)[0]
    if lower:
        return float(max(1.0, np.ceil(k - 1e-6) + 1.0))
    return float(max(1.0, np.floor(k + 1e-6)))


class MonotoneEnvelope:
    """Monotone C^1 interpolant of a table on ``[0, inf)``.

    Parameters
    ----------
    breakpoints : increasing grid starting at 0.
    values : table values; must respect ``monotonicity``.
    monotonicity : "nondecreasing", "nonincreasing" or "none".
    continuation : "linear" (end slope) or "constant" beyond the last breakpoint.
    origin_power : if given, ``[0, s_1]`` uses ``y_1 (s/s_1)^p``; requires ``values[0] == 0``.
    class_kinf : marks a class-K-infinity envelope (zero at 0, strictly
        increasing, linear growth).
    """

    def __init__(
        self,
        breakpoints: Sequence[float],
        values: Sequence[float],
        monotonicity: str = "none",
        continuation: str = "linear",
        origin_power: float | None = None,
        class_kinf: bool = False,
        name: str = "",
    ):
        s = np.asarray(breakpoints, dtype=float)
        y = np.asarray(values, dtype=float)
        if s.ndim != 1 or s.shape != y.shape or len(s) < 2:
            raise ValueError("breakpoints and values must be matching 1-d tables of length >= 2")
        if s[0] != 0.0 or np.any(np.diff(s) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")
        if not np.all(np.isfinite(y)):
            raise ValueError("envelope values must be finite")
        if monotonicity not in _MONO:
            raise ValueError(f"unknown monotonicity {monotonicity!r}")
        if continuation not in ("linear", "constant"):
            raise ValueError(f"unknown continuation {continuation!r}")
        d = np.diff(y)
        if monotonicity == "nondecreasing" and np.any(d < 0):
            raise ValueError("values are not nondecreasing")
        if monotonicity == "nonincreasing" and np.any(d > 0):
            raise ValueError("values are not nonincreasing")
        if class_kinf:
            if y[0] != 0.0 or np.any(d <= 0):
                raise ValueError("class-K-infinity envelope needs value 0 at 0 and strictly increasing values")
            if continuation != "linear":
                raise ValueError("class-K-infinity envelope needs linear continuation")
        if origin_power is not None and (origin_power <= 0 or y[0] != 0.0):
            raise ValueError("origin power law needs a positive exponent and value 0 at 0")
        self.breakpoints = s
        self.values = y
        self.monotonicity = monotonicity
        self.continuation = continuation
        self.origin_power = None if origin_power is None else float(origin_power)
        self.class_kinf = class_kinf
        self.name = name
        start = 1 if self.origin_power is not None else 0
        if len(s) - start >= 2:
            self._pchip = PchipInterpolator(s[start:], y[start:], extrapolate=False)
        else:
            self._pchip = None
        self._start = start
        if continuation == "linear":
            slope = float(self._pchip(s[-1], 1)) if self._pchip is not None else 0.0
            if class_kinf and slope <= 0:
                slope = (y[-1] - y[-2]) / (s[-1] - s[-2])
            elif monotonicity == "nondecreasing":
                slope = max(slope, 0.0)
            elif monotonicity == "nonincreasing":
                slope = min(slope, 0.0)
            self.tail_slope = slope
        else:
            self.tail_slope = 0.0

    def __repr__(self) -> str:
        return f"MonotoneEnvelope({self.name or '?'}, K={len(self.breakpoints)}, {self.monotonicity})"

    # -- evaluation -------------------------------------------------------
    def _eval(self, s, nu: int = 0):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("envelopes are defined on [0, inf)")
        out = np.zeros_like(s)
        bp, y = self.breakpoints, self.values
        last = bp[-1]
        mid = (s >= bp[self._start]) & (s <= last)
        if np.any(mid):
            out[mid] = self._pchip(s[mid], nu) if self._pchip is not None else (y[-1] if nu == 0 else 0.0)
        tail = s > last
        if np.any(tail):
            if nu == 0:
                out[tail] = y[-1] + self.tail_slope * (s[tail] - last)
            elif nu == 1:
                out[tail] = self.tail_slope
        if self.origin_power is not None:
            head = s < bp[1]
            if np.any(head):
                p, s1, y1 = self.origin_power, bp[1], y[1]
                coef = y1 / s1**p
                for j in range(nu):
                    coef = coef * (p - j)
                e = p - nu
                sh = s[head]
                if e == 0:
                    out[head] = coef
                else:
                    with np.errstate(divide="ignore"):
                        out[head] = np.where(sh > 0, coef * np.abs(sh) ** e, 0.0 if e > 0 else np.inf)
        return out[()] if out.ndim == 0 else out

    def evaluate(self, s, nu: int = 0):
        """Value (``nu=0``) or ``nu``-th derivative; propagates dual numbers."""
        if isinstance(s, Dual):
            return s._chain(self.evaluate(s.value, nu), self.evaluate(s.value, nu + 1))
        return self._eval(s, nu)

    def __call__(self, s):
        return self.evaluate(s, 0)

    def derivative(self, s):
        return self.evaluate(s, 1)

    # -- derived objects ----------------------------------------------------
    def scaled(self, factor: float, name: str = "") -> "MonotoneEnvelope":
        mono = self.monotonicity
        if factor < 0:
            mono = {"nondecreasing": "nonincreasing", "nonincreasing": "nondecreasing"}.get(mono, mono)
        return MonotoneEnvelope(
            self.breakpoints,
            factor * self.values,
            mono,
            self.continuation,
            self.origin_power,
            self.class_kinf and factor > 0,
            name or self.name,
        )

    def inverse(self, v):
        """Inverse of a strictly increasing envelope (vectorized bisection)."""
        if not self.class_kinf:
            raise ValueError("inverse is only defined for class-K-infinity envelopes")
        if isinstance(v, Dual):
            r = self.inverse(v.value)
            return v._chain(r, 1.0 / self.evaluate(r, 1))
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise ValueError("inverse needs nonnegative arguments")
        bp, y = self.breakpoints, self.values
        out = np.empty_like(v)
        tail = v > y[-1]
        out[tail] = bp[-1] + (v[tail] - y[-1]) / self.tail_slope
        inner = ~tail
        if np.any(inner):
            vi = v[inner]
            k = np.clip(np.searchsorted(y, vi, side="right") - 1, 0, len(y) - 2)
            lo, hi = bp[k].copy(), bp[k + 1].copy()
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                above = self._eval(mid) >= vi
                hi = np.where(above, mid, hi)
                lo = np.where(above, lo, mid)
            out[inner] = hi
        return out[()] if out.ndim == 0 else out

    def integral(self):
        """The function ``s -> int_0^s envelope``, accepting duals."""
        return _EnvelopeIntegral(self)

    # -- serialization ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "name": self.name,
            "breakpoints": [float(b) for b in self.breakpoints],
            "values": [float(v) for v in self.values],
            "monotonicity": self.monotonicity,
            "continuation": self.continuation,
            "origin_power": self.origin_power,
            "class_kinf": self.class_kinf,
        }

    @classmethod
    def from_json(cls, data: dict) -> "MonotoneEnvelope":
        return cls(
            data["breakpoints"],
            data["values"],
            data["monotonicity"],
            data["continuation"],
            data.get("origin_power"),
            data.get("class_kinf", False),
            data.get("name", ""),
        )

    @classmethod
    def constant(cls, c: float, top: float = 1.0, name: str = "") -> "MonotoneEnvelope":
        mono = "nondecreasing"
        return cls([0.0, top], [c, c], mono, "constant", name=name)


class _EnvelopeIntegral:
    """Exact antiderivative of an envelope on every piece."""

    def __init__(self, env: MonotoneEnvelope):
        self.env = env
        bp, y = env.breakpoints, env.values
        self._head = 0.0
        if env.origin_power is not None:
            p = env.origin_power
            self._head = y[1] * bp[1] / (p + 1.0)
        self._anti = env._pchip.antiderivative() if env._pchip is not None else None
        self._mid_total = float(self._anti(bp[-1])) if self._anti is not None else 0.0

    def _eval(self, s):
        env = self.env
        s = np.asarray(s, dtype=float)
        bp, y = env.breakpoints, env.values
        out = np.zeros_like(s)
        start = bp[env._start]
        if env.origin_power is not None:
            p = env.origin_power
            head = np.minimum(s, bp[1])
            out += y[1] * bp[1] * (head / bp[1]) ** (p + 1.0) / (p + 1.0)
        if self._anti is not None:
            clip = np.clip(s, start, bp[-1])
            out += np.where(s > start, self._anti(clip), 0.0)
        tail = np.maximum(s - bp[-1], 0.0)
        out += y[-1] * tail + 0.5 * env.tail_slope * tail**2
        return out[()] if out.ndim == 0 else out

    def __call__(self, s):
        if isinstance(s, Dual):
            return s._chain(self(s.value), self.env.evaluate(s.value, 0))
        return self._eval(s)


class Univariate:
    """A one-variable function with an explicit derivative, lifted to duals.

    ``base`` evaluates floats/arrays; ``derivative`` is any callable that
    itself accepts duals (for instance another Univariate or a generic
    expression), which makes nested differentiation work.
    """

    def __init__(self, base: Callable, derivative: Callable, name: str = ""):
        self.base = base
        self.deriv = derivative
        self.name = name

    def __call__(self, s):
        if isinstance(s, Dual):
            return s._chain(self(s.value), self.deriv(s.value))
        return self.base(s)


class CumulativeIntegral:
    """``t -> int_0^t integrand`` for a smooth-between-knots integrand.

    The integral is tabulated exactly (20-point Gauss-Legendre per panel)
    at the knots; off-knot values add a Gauss-Legendre integral over the
    partial panel, so the result is an explicit smooth function of ``t``
    whose derivative is the integrand, to rounding. Beyond the last knot
    ``tail(a, t)`` must return ``int_a^t integrand``; without one a
    ``ValueError`` is raised.
    """

    def __init__(self, integrand: Callable, knots: Sequence[float], tail: Callable | None = None, max_ratio: float = 1.25):
        knots = np.unique(np.asarray(knots, dtype=float))
        if knots[0] != 0.0:
            knots = np.concatenate([[0.0], knots])
        knots = _refine(knots, max_ratio)
        self.integrand = integrand
        self.knots = knots
        self.tail = tail
        a, b = knots[:-1], knots[1:]
        x, w = GL_NODES
        pts = a[:, None] + (b - a)[:, None] * x[None, :]
        vals = np.asarray(integrand(pts.ravel()), dtype=float).reshape(pts.shape)
        panel = (b - a) * (vals @ w)
        self.table = np.concatenate([[0.0], np.cumsum(panel)])

    def _eval(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("cumulative integral is defined on [0, inf)")
        knots = self.knots
        last = knots[-1]
        inside = np.minimum(t, last)
        k = np.clip(np.searchsorted(knots, inside, side="right") - 1, 0, len(knots) - 2)
        a = knots[k]
        x, w = GL_NODES
        width = inside - a
        pts = a[..., None] + width[..., None] * x
        vals = np.asarray(self.integrand(pts.reshape(-1)), dtype=float).reshape(pts.shape)
        out = self.table[k] + width * (vals @ w)
        beyond = t > last
        if np.any(beyond):
            if self.tail is None:
                raise ValueError(f"argument beyond the tabulated range (> {last:g})")
            out = np.where(beyond, self.table[-1] + self.tail(last, np.maximum(t, last)), out)
        return out[()] if out.ndim == 0 else out

    def __call__(self, t):
        if isinstance(t, Dual):
            return t._chain(self(t.value), self.integrand(t.value))
        return self._eval(t)


def _refine(knots: np.ndarray, max_ratio: float) -> np.ndarray:
    """Subdivide panels so that consecutive positive knots differ by at most ``max_ratio``."""
    out = [knots[0]]
    for a, b in zip(knots[:-1], knots[1:]):
        if a > 0 and b / a > max_ratio:
            m = int(np.ceil(np.log(b / a) / np.log(max_ratio)))
            out.extend(a * (b / a) ** (np.arange(1, m + 1) / m))
        else:
            out.append(b)
    out = np.asarray(out)
    out[-1] = knots[-1]
    return out


def band_extrema(band_values: Sequence[np.ndarray], mode: str, skip_first: bool = False) -> np.ndarray:
    """Per-node extrema over the two bands adjacent to each node.

    ``band_values[k]`` holds sampled values for the band between nodes
    ``k`` and ``k + 1``; the returned array has one entry per node
    (``len(band_values) + 1``) and node ``k`` combines bands ``k - 1`` and
    ``k``. Interpolating between nodes then never leaves the range that
    was actually sampled around them. With ``skip_first`` band 0 is
    ignored (node 0 gets NaN and node 1 uses band 1 only), for quantities
    that vanish at the origin.
    """
    if mode not in ("min", "max"):
        raise ValueError("mode must be 'min' or 'max'")
    red = np.min if mode == "min" else np.max
    per_band = np.array([red(v) if len(v) else np.nan for v in band_values], dtype=float)
    if skip_first:
        per_band[0] = np.nan
    nb = len(per_band)
    out = np.empty(nb + 1)
    pick = np.nanmin if mode == "min" else np.nanmax
    for k in range(nb + 1):
        window = per_band[max(k - 1, 0): min(k + 1, nb)]
        out[k] = pick(window) if np.any(np.isfinite(window)) else np.nan
    return out
