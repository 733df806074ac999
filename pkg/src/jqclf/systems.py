"""Control systems, affine data extraction and the built-in examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import fields as F
from .envelopes import GL_NODES
from .fields import Dual, ScalarField, VectorField
from .sampling import Sampler

__all__ = [
    "SystemError_",
    "ControlAffineSystem",
    "FullyNonlinearSystem",
    "MechanicalData",
    "SystemBundle",
    "extract_affine_data",
    "remainder_h",
    "hamiltonian_system",
    "smooth_G",
    "builtin_oscillator",
    "builtin_manipulator",
    "builtin",
    "BUILTINS",
]

_ORIGIN_TOL = 1e-12


class SystemError_(ValueError):
    """Invalid system data; ``witness`` holds an offending point when known."""

    def __init__(self, message: str, witness=None):
        self.witness = None if witness is None else np.asarray(witness, dtype=float)
        super().__init__(message)


def _columns_matrix(columns: Sequence[VectorField], x) -> np.ndarray:
    # (n, m) for one point, (n, m, batch) for a batch
    return np.stack([np.asarray(g(x)) for g in columns], axis=1)


class ControlAffineSystem:
    """``x' = f(x) + sum_k g_k(x) u_k``."""

    def __init__(self, f: VectorField, g: Sequence[VectorField], name: str = "", check: bool = True):
        self.f = f
        self.g = list(g)
        self.n = f.n
        self.m = len(self.g)
        self.name = name
        for gk in self.g:
            if gk.n != self.n:
                raise SystemError_("input column dimension does not match the drift")
        if check:
            f0 = np.asarray(f(np.zeros(self.n)))
            if np.max(np.abs(f0)) > _ORIGIN_TOL:
                raise SystemError_(f"drift does not vanish at the origin (|f(0)| = {np.max(np.abs(f0)):.3g})")

    def input_matrix(self, x) -> np.ndarray:
        return _columns_matrix(self.g, x)

    def rhs(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = np.asarray(self.f(x), dtype=float)
        for k, gk in enumerate(self.g):
            out = out + np.asarray(gk(x)) * u[k]
        return out

    def generic_rhs(self, x: list, u: list) -> list:
        out = list(self.f.fn(x))
        for k, gk in enumerate(self.g):
            col = gk.fn(x)
            out = [o + c * u[k] for o, c in zip(out, col)]
        return out

    def closed_loop(self, feedback_fn: Callable[[list], list]) -> VectorField:
        """Vector field ``f + g k(x)`` for a generic feedback ``k``."""
        return VectorField(lambda x: self.generic_rhs(x, feedback_fn(x)), self.n, name="closed-loop")

    def as_nonlinear(self) -> "FullyNonlinearSystem":
        return FullyNonlinearSystem(self.generic_rhs, self.n, self.m, name=self.name, check=False, affine=self)


class FullyNonlinearSystem:
    """``x' = F(x, u)``; ``F`` maps coordinate lists (floats, arrays or duals) to a list."""

    def __init__(self, F_fn: Callable[[list, list], list], n: int, m: int, name: str = "", check: bool = True, affine: ControlAffineSystem | None = None):
        self.F_fn = F_fn
        self.n = n
        self.m = m
        self.name = name
        self._affine = affine
        if check:
            out = np.asarray(self(np.zeros(n), np.zeros(m)))
            if np.max(np.abs(out)) > _ORIGIN_TOL:
                raise SystemError_(f"F(0, 0) does not vanish (|F(0,0)| = {np.max(np.abs(out)):.3g})")

    def __call__(self, x, u) -> np.ndarray:
        xs = [np.asarray(c, dtype=float) for c in np.asarray(x, dtype=float)]
        us = [np.asarray(c, dtype=float) for c in np.asarray(u, dtype=float)]
        shape = np.broadcast_shapes(*[c.shape for c in xs + us])
        return np.stack([np.broadcast_to(np.asarray(F.base_value(y), dtype=float), shape) for y in self.F_fn(xs, us)])

    def input_jacobian_generic(self, x: list, u: list) -> list:
        """``dF/du`` as a list of ``m`` columns (each a list of ``n`` entries)."""
        cols = []
        for k in range(self.m):
            tag = F._new_tag()
            useed = [Dual(uj, [1.0 if j == k else 0.0], tag) for j, uj in enumerate(u)]
            out = self.F_fn(x, useed)
            cols.append([y.tangents[0] if isinstance(y, Dual) and y.tag == tag else 0.0 for y in out])
        return cols

    def check_c2_in_u(self, sampler: Sampler, input_radius: float = 1.0, count: int = 256) -> float:
        """Largest sampled second u-derivative magnitude; raises if not finite."""
        x = sampler.ball(self.n, "c2-x", count)
        u = Sampler(seed=sampler.seed, radius=input_radius).ball(self.m, "c2-u", count)
        worst = 0.0
        xs = list(x)
        for k in range(self.m):
            tag = F._new_tag()
            us = [Dual(u[j], [1.0 if j == k else 0.0], tag) for j in range(self.m)]
            col = self.input_jacobian_generic(xs, us)[k]
            vals = [y.tangents[0] if isinstance(y, Dual) and y.tag == tag else 0.0 for y in col]
            arr = np.abs(np.stack([np.broadcast_to(np.asarray(F.base_value(v), dtype=float), (count,)) for v in vals]))
            if not np.all(np.isfinite(arr)):
                raise SystemError_("second input derivative is not finite at a sample")
            worst = max(worst, float(arr.max()))
        return worst


def extract_affine_data(sys: FullyNonlinearSystem) -> tuple[VectorField, list[VectorField]]:
    """``f(x) = F(x, 0)`` and ``g(x) = dF/du(x, 0)`` by exact differentiation in ``u``."""
    zeros = [0.0] * sys.m
    f = VectorField(lambda x: sys.F_fn(x, zeros), sys.n, name="f")
    g = [
        VectorField(lambda x, k=k: sys.input_jacobian_generic(x, zeros)[k], sys.n, name=f"g{k + 1}")
        for k in range(sys.m)
    ]
    return f, g


def affine_from_nonlinear(sys: FullyNonlinearSystem) -> ControlAffineSystem:
    if sys._affine is not None:
        return sys._affine
    f, g = extract_affine_data(sys)
    return ControlAffineSystem(f, g, name=sys.name)


def _jac_u(sys: FullyNonlinearSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    xs = [x[i] for i in range(sys.n)]
    us = [u[j] for j in range(sys.m)]
    cols = sys.input_jacobian_generic(xs, us)
    shape = np.broadcast_shapes(*[np.shape(c) for c in xs + us])
    return np.stack(
        [np.stack([np.broadcast_to(np.asarray(F.base_value(c), dtype=float), shape) for c in col]) for col in cols],
        axis=1,
    )


def remainder_h(sys: FullyNonlinearSystem, x, u, tol: float = 1e-10, max_depth: int = 12) -> np.ndarray:
    """``h(x, u) = int_0^1 [dF/du(x, lam u) - dF/du(x, 0)] dlam``.

    Adaptive Gauss-Legendre over ``lam``: panels are bisected until the
    20-point rule on a panel agrees with the sum over its halves to
    ``tol``. Returns an ``(n, m)`` matrix, or ``(n, m, batch)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[:, None]
        u = u[:, None]
    batch = np.broadcast_shapes(x.shape[1:], u.shape[1:])
    x = np.broadcast_to(x, (sys.n,) + batch)
    u = np.broadcast_to(u, (sys.m,) + batch)
    g0 = _jac_u(sys, x, np.zeros_like(u))
    nodes, weights = GL_NODES

    def panel(a: float, b: float) -> np.ndarray:
        acc = np.zeros_like(g0)
        for lam, w in zip(a + (b - a) * nodes, weights):
            acc += w * (_jac_u(sys, x, lam * u) - g0)
        return (b - a) * acc

    def adapt(a: float, b: float, whole: np.ndarray, depth: int) -> np.ndarray:
        m = 0.5 * (a + b)
        left, right = panel(a, m), panel(m, b)
        err = float(np.max(np.abs(left + right - whole))) if whole.size else 0.0
        if err <= tol:
            return left + right
        if depth >= max_depth:
            raise ArithmeticError(f"remainder quadrature did not converge (error estimate {err:.3g})")
        return adapt(a, m, left, depth + 1) + adapt(m, b, right, depth + 1)

    h = adapt(0.0, 1.0, panel(0.0, 1.0), 0)
    return h[..., 0] if single else h


# ---------------------------------------------------------------------------
# mechanical systems

@dataclass
class MechanicalData:
    """Inverse inertia ``Minv(q)`` (generic callable returning nested lists) and potential ``P(q)``."""

    Minv: Callable[[list], list]
    P: ScalarField
    offset: float = 0.0

    @property
    def dof(self) -> int:
        return self.P.n

    @staticmethod
    def constant_inertia(M) -> Callable[[list], list]:
        """Helper turning a constant inertia matrix into ``Minv``."""
        Minv = np.linalg.inv(np.asarray(M, dtype=float))
        rows = [[float(v) for v in row] for row in Minv]
        return lambda q: rows

    def validate(self, sampler: Sampler) -> dict:
        k = self.dof
        q = sampler.ball(k, "mech-q")
        mats = np.array(
            [[np.broadcast_to(np.asarray(F.base_value(e), dtype=float), q.shape[1:]) for e in row] for row in self.Minv(list(q))]
        )  # (k, k, batch)
        mats = np.moveaxis(mats, -1, 0)
        asym = np.max(np.abs(mats - np.swapaxes(mats, 1, 2)), axis=(1, 2))
        bad = np.argmax(asym)
        if asym[bad] > 1e-12 * (1 + np.max(np.abs(mats[bad]))):
            raise SystemError_("inverse inertia is not symmetric", q[:, bad])
        eig = np.linalg.eigvalsh(mats)
        bad = np.argmin(eig[:, 0])
        if eig[bad, 0] <= 0:
            raise SystemError_("inverse inertia is not positive definite", q[:, bad])
        P0 = float(self.P(np.zeros(k))) + self.offset
        if abs(P0) > _ORIGIN_TOL:
            raise SystemError_(f"potential (plus offset) does not vanish at 0: {P0:.3g}")
        Pq = self.P(q) + self.offset
        nz = np.linalg.norm(q, axis=0) > 0
        if np.any(Pq[nz] <= 0):
            idx = np.flatnonzero(nz & (Pq <= 0))[0]
            raise SystemError_("potential is not positive definite", q[:, idx])
        gradP = F.gradient(self.P, q)
        gn = np.linalg.norm(gradP, axis=0)
        if np.any(gn[nz] == 0):
            idx = np.flatnonzero(nz & (gn == 0))[0]
            raise SystemError_("potential gradient vanishes away from the origin", q[:, idx])
        radii = np.linspace(sampler.radius / 8, sampler.radius, 8)
        dirs = sampler.ball(k, "mech-dirs", 512)
        dirs = dirs / np.maximum(np.linalg.norm(dirs, axis=0), 1e-300)
        growth = [float(np.min(self.P(dirs * r))) + self.offset for r in radii]
        return {
            "region_radius": sampler.radius,
            "samples": int(q.shape[1]),
            "min_eigenvalue": float(eig[:, 0].min()),
            "max_eigenvalue": float(eig[:, -1].max()),
            "potential_sphere_minima": growth,
            "radially_growing": bool(np.all(np.diff(growth) > 0)),
        }


def hamiltonian_system(md: MechanicalData, validate: Sampler | None = None) -> tuple[ControlAffineSystem, ScalarField, VectorField]:
    """Hamiltonian form ``q' = Minv(q) p``, ``p' = -dH/dq + tau`` with ``V = H``, ``G = (0, grad P)``."""
    k = md.dof
    n = 2 * k
    if validate is not None:
        md.validate(validate)

    def H(x):
        q, p = x[:k], x[k:]
        Mi = md.Minv(q)
        kin = 0.0
        for i in range(k):
            for j in range(k):
                kin = kin + p[i] * Mi[i][j] * p[j]
        return 0.5 * kin + md.P.fn(q) + md.offset

    def drift(x):
        q, p = x[:k], x[k:]
        Mi = md.Minv(q)
        qdot = []
        for i in range(k):
            acc = 0.0
            for j in range(k):
                acc = acc + Mi[i][j] * p[j]
            qdot.append(acc)
        dHdq = F._grad_generic(lambda qq: H(list(qq) + list(p)), list(q))
        return qdot + [-d for d in dHdq]

    def G(x):
        q = x[:k]
        return [0.0] * k + F._grad_generic(md.P.fn, list(q))

    f = VectorField(drift, n, name="f")
    g = [VectorField(lambda x, i=i: [0.0] * (k + i) + [1.0] + [0.0] * (k - i - 1), n, name=f"g{i + 1}") for i in range(k)]
    sys = ControlAffineSystem(f, g, name="hamiltonian")
    return sys, ScalarField(H, n, name="H"), VectorField(G, n, name="G")


def smooth_G(G: VectorField, V: ScalarField, N: int) -> VectorField:
    """``G_N(x) = V(x)^N G(x)``."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    if N == 0:
        return G

    def fn(x):
        scale = F.power(V.fn(x), N)
        return [scale * c for c in G.fn(x)]

    return VectorField(fn, G.n, name=f"V^{N} {G.name}")


# ---------------------------------------------------------------------------
# built-in examples

@dataclass
class SystemBundle:
    """A built-in system with its Lyapunov data and reference objects."""

    name: str
    system: ControlAffineSystem
    V: ScalarField
    G: VectorField
    raw: FullyNonlinearSystem | None = None
    Vsharp: ScalarField | None = None
    reference_feedback: Callable | None = None
    raw_feedback: Callable | None = None
    closed_forms: dict = field(default_factory=dict)
    weak_jq_l: int = 1

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m


def builtin_oscillator() -> SystemBundle:
    """Harmonic oscillator: ``Minv = 1``, ``P(q) = q^2 / 2``, state ``(q, p)``."""
    md = MechanicalData(lambda q: [[1.0]], ScalarField(lambda q: 0.5 * q[0] * q[0], 1, name="P"))
    sys, V, G = hamiltonian_system(md)
    sys.name = "harmonic-oscillator"
    closed = {
        "LGV": ScalarField(lambda x: x[0] * x[1], 2, name="LGV"),
        "LfLGV": ScalarField(lambda x: x[1] * x[1] - x[0] * x[0], 2, name="LfLGV"),
    }
    return SystemBundle("harmonic-oscillator", sys, V, G, raw=sys.as_nonlinear(), closed_forms=closed)


def _manip_raw(x, u):
    x1, x2, x3, x4 = x
    tau, force = u
    den = x3 * x3 + 1.0
    return [
        x2,
        -2.0 * x3 * x2 * x4 / den + tau / den,
        x4,
        x3 * x2 * x2 + force,
    ]


def _manip_V(x):
    x1, x2, x3, x4 = x
    return 0.5 * ((x3 * x3 + 1.0) * x2 * x2 + x4 * x4 + F.sqrt(1.0 + x1 * x1) + F.sqrt(1.0 + x3 * x3) - 2.0)


def _manip_f(x):
    x1, x2, x3, x4 = x
    den = x3 * x3 + 1.0
    return [
        x2,
        (-2.0 * x3 * x2 * x4 - x1 * F.angle(x1)) / den,
        x4,
        x2 * x2 * x3 - x3 * F.angle(x3),
    ]


def _manip_LGV(x):
    x1, x2, x3, x4 = x
    return (x3 * x3 + 1.0) * x2 * x1 + x4 * x3


def _manip_LfLGV(x):
    x1, x2, x3, x4 = x
    return x2 * x2 * (2.0 * x3 * x3 + 1.0) + x4 * x4 - x1 * x1 * F.angle(x1) - x3 * x3 * F.angle(x3)


def _manip_Vsharp(x):
    w = 2.0 + 2.0 * _manip_V(x)
    return 40.0 * F.power(w, 6) + _manip_LGV(x) - 40.0 * 2.0**6


def builtin_manipulator() -> SystemBundle:
    """Two-link manipulator with unit masses and arm length sqrt(3).

    State ``(theta, theta', r, r')``; raw inputs ``(tau, F)``. The affine
    system uses the inputs ``(tau_b, F_b)`` left after cancelling the
    potential-like terms of the energy derivative.
    """
    raw = FullyNonlinearSystem(_manip_raw, 4, 2, name="two-link-manipulator-raw")
    f = VectorField(_manip_f, 4, name="f")
    g = [
        VectorField(lambda x: [0.0, 1.0 / (x[2] * x[2] + 1.0), 0.0, 0.0], 4, name="g1"),
        VectorField(lambda x: [0.0, 0.0, 0.0, 1.0], 4, name="g2"),
    ]
    sys = ControlAffineSystem(f, g, name="two-link-manipulator")
    V = ScalarField(_manip_V, 4, name="V")
    G = VectorField(lambda x: [0.0, x[0], 0.0, x[2]], 4, name="G")
    Vsharp = ScalarField(_manip_Vsharp, 4, name="Vsharp")

    def reference_feedback(x):
        # inputs of the affine system
        return [-x[1] * F.angle(x[1]), -x[3] * F.angle(x[3])]

    def raw_feedback(x):
        return [-x[0] * F.angle(x[0]) - x[1] * F.angle(x[1]), -x[2] * F.angle(x[2]) - x[3] * F.angle(x[3])]

    def T1(x):
        x1, x2, x3, x4 = x
        w = 2.0 + 2.0 * _manip_V(x)
        return F.sqrt(1.0 + x1 * x1) - 480.0 * F.power(w, 5) + 2.0 * F.sqrt(1.0 + x2 * x2) * (2.0 * x3 * x3 + 1.0) + 0.5

    def T2(x):
        x1, x2, x3, x4 = x
        w = 2.0 + 2.0 * _manip_V(x)
        return F.sqrt(1.0 + x3 * x3) - 480.0 * F.power(w, 5) + 2.0 * F.sqrt(1.0 + x4 * x4) + 0.5

    def decay_bound(x):
        return -0.5 * sum(xi * xi * F.angle(xi) for xi in x)

    def changed(x, u):
        # raw dynamics after the input change tau = -x1<x1> + u1, F = -x3<x3> + u2
        return _manip_raw(x, [-x[0] * F.angle(x[0]) + u[0], -x[2] * F.angle(x[2]) + u[1]])

    closed = {
        "LGV": ScalarField(_manip_LGV, 4, name="LGV"),
        "LfLGV": ScalarField(_manip_LfLGV, 4, name="LfLGV"),
        "LgV": VectorField(lambda x: [x[1], x[3]], 4, name="LgV", dim=2),
        "T1": ScalarField(T1, 4, name="T1"),
        "T2": ScalarField(T2, 4, name="T2"),
        "decay_bound": ScalarField(decay_bound, 4, name="decay_bound"),
        "changed_system": FullyNonlinearSystem(changed, 4, 2, name="two-link-manipulator-changed"),
    }
    return SystemBundle(
        "two-link-manipulator",
        sys,
        V,
        G,
        raw=raw,
        Vsharp=Vsharp,
        reference_feedback=reference_feedback,
        raw_feedback=raw_feedback,
        closed_forms=closed,
    )


BUILTINS = {
    "two-link-manipulator": builtin_manipulator,
    "harmonic-oscillator": builtin_oscillator,
}


def builtin(name: str) -> SystemBundle:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise SystemError_(f"unknown built-in system {name!r}; choose from {sorted(BUILTINS)}") from None
