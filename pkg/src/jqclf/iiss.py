"""Integral input-to-state stability under additive actuator errors.

Given a bound ``|L_g V(x)| <= D(V(x))`` with ``int_0^inf ds / D(s) = inf``,
the CLF ``U`` from the synthesis is rescaled to

    Utilde(x) = int_0^{U(x)} dp / D'(p),    D'(p) = D(2p) + 1,

so that ``|L_g Utilde| <= 1`` and, for ``x' = f + g (K(x) + d)``,

    grad Utilde . F(x, d) <= -alpha_5(|x|) + |d|.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fields as F
from .envelopes import CumulativeIntegral, MonotoneEnvelope, estimate_power, Univariate
from .exprparser import parse
from .fields import ScalarField, VectorField
from .sampling import Sampler, rng_for
from .synthesis import (
    DeltaFunction,
    SynthesisError,
    SynthesisResult,
    _node_reduce,
    build_U,
    radial_cloud,
)
from .systems import MechanicalData
from .verify import Certificate, _certificate

__all__ = [
    "DFunction",
    "validate_D",
    "adjust_D_for_U",
    "check_key_bound",
    "build_tildeU",
    "iiss_decay_field",
    "check_decay",
    "IISSResult",
    "build_iiss",
    "hamiltonian_D",
    "check_hamiltonian_bound",
]

DECAY_TOL = 1e-9
PROBE_TOP = 1e6
MAX_HALVINGS = 8


@dataclass
class DFunction:
    """Positive nondecreasing ``D`` (evaluates floats, arrays and duals)."""

    fn: Callable
    declared_divergence: bool = True
    name: str = "D"
    source: str = ""

    def __call__(self, s):
        return self.fn(s)

    @classmethod
    def from_expression(cls, source: str, declared_divergence: bool = True) -> "DFunction":
        """``D`` from an expression in the variable ``s``."""
        expr = parse(source, 0, 0, names=("s",))
        return cls(lambda s: expr.evaluate_generic({"s": s}), declared_divergence, "D", source)

    def table(self, grid: np.ndarray | None = None) -> dict:
        grid = _probe_grid() if grid is None else grid
        return {"s": grid.tolist(), "D": np.asarray(self(grid), dtype=float).tolist()}

    def to_json(self) -> dict:
        return {"name": self.name, "source": self.source, "declared_divergence": self.declared_divergence, **self.table(_probe_grid(49))}


def _probe_grid(count: int = 241) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(1e-6, PROBE_TOP, count - 1)])


def _divergence_probe(D: DFunction) -> dict:
    """Growth of ``int_0^S ds / D`` per decade of ``S`` up to ``1e6``.

    The integral is recorded as finitely consistent with divergence when
    the per-decade increments over the last three decades do not shrink
    faster than geometrically with ratio 1/2.
    """
    knots = np.concatenate([[0.0], np.geomspace(1e-6, PROBE_TOP, 13)])
    integral = CumulativeIntegral(lambda s: 1.0 / D(s), knots)
    decades = np.geomspace(1e0, PROBE_TOP, 7)
    values = np.asarray(integral(decades), dtype=float)
    inc = np.diff(values)
    ratios = inc[1:] / np.maximum(inc[:-1], 1e-300)
    consistent = bool(np.all(inc[-3:] > 0) and np.all(ratios[-2:] >= 0.5))
    return {"S": decades.tolist(), "integral": values.tolist(), "consistent": consistent}


def validate_D(D: DFunction, V: ScalarField, LgV: list, sampler: Sampler) -> Certificate:
    """Positivity, monotonicity, ``|L_g V| <= D(V)`` at samples and the divergence probe."""
    grid = _probe_grid()
    vals = np.asarray(D(grid), dtype=float)
    notes = []
    details = {"declared_divergence": D.declared_divergence}
    dv = np.diff(vals)
    if np.any(dv < 0):
        k = int(np.flatnonzero(dv < 0)[0])
        return Certificate("H3", "fail", sampler.radius, len(grid), sampler.seed, float(dv[k]), [float(grid[k + 1])], ["D nondecreasing"], details, ["D is not nondecreasing (witness is the level s)"])
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        k = int(np.flatnonzero(~(vals > 0))[0])
        return Certificate("H3", "fail", sampler.radius, len(grid), sampler.seed, float(vals[k]) if np.isfinite(vals[k]) else float("nan"), [float(grid[k])], ["D>0"], details, ["D is not positive (witness is the level s)"])
    probe = _divergence_probe(D)
    details["divergence_probe"] = probe
    details["condition_i"] = "declared, finitely consistent" if (D.declared_divergence and probe["consistent"]) else "not established"
    X = sampler.ball(V.n, "H3")
    lg = np.linalg.norm(np.stack([np.asarray(c(X)) for c in LgV]), axis=0)
    margin = np.asarray(D(np.asarray(V(X))), dtype=float) - lg
    cert = _certificate("H3", margin, X, sampler, ["D>0", "D nondecreasing", "|LgV|<=D(V)", "divergence"], details=details, notes=notes)
    if cert.passed and details["condition_i"] != "declared, finitely consistent":
        cert.verdict = "fail"
        cert.notes.append("divergence of int ds/D is neither declared nor consistent with the finite probe")
    return cert


def adjust_D_for_U(D: DFunction) -> DFunction:
    """``D'(p) = D(2p) + 1``."""
    return DFunction(lambda p: D(2.0 * p) + 1.0, D.declared_divergence, "D'", f"({D.source or 'D'})(2p) + 1")


def check_key_bound(U: ScalarField, LgU: list, D: DFunction, X: np.ndarray, sampler: Sampler) -> Certificate:
    """``|L_g U(x)| <= D(U(x))`` at ``X``."""
    lg = np.linalg.norm(np.stack([np.asarray(c(X)) for c in LgU]), axis=0)
    margin = np.asarray(D(np.asarray(U(X))), dtype=float) - lg
    return _certificate("U-input-gain", margin, X, sampler, ["|LgU|<=D'(U)"])


class TildeU:
    """``Utilde(x) = int_0^{U(x)} dp / D(p)`` by tabulated Gauss-Legendre quadrature."""

    def __init__(self, U: ScalarField, D: DFunction, top: float = 1e12):
        self.U = U
        self.D = D
        knots = np.concatenate([[0.0], np.geomspace(1e-12, top, 25)])
        self.integral = CumulativeIntegral(lambda p: 1.0 / D(p), knots)
        self.field = ScalarField(lambda x: self.integral(U.fn(x)), U.n, name="Utilde")

    def __call__(self, x):
        return self.field(x)


def build_tildeU(U: ScalarField, D: DFunction) -> ScalarField:
    return TildeU(U, D).field


def iiss_decay_field(Ut: ScalarField, system, feedback_generic: Callable, settings) -> tuple[ScalarField, MonotoneEnvelope]:
    """``decay = grad Utilde . (f + g K)`` and ``alpha_5`` below the sphere minima of ``-decay``."""
    cl = system.closed_loop(feedback_generic)
    decay = F.lie_derivative(Ut, cl)
    decay.name = "decay"
    cloud = radial_cloud(Ut.n, settings, stream="alpha5")
    neg = lambda x: -np.asarray(decay(x))
    ext, where = cloud.band_extremes("-decay", neg, "min")
    bad = np.flatnonzero(ext[1:] <= 0)
    if len(bad):
        k = bad[0] + 1
        raise SynthesisError("the closed-loop derivative of Utilde is not negative on a sphere band", constraint="decay", witness=where[k])
    nodes = settings.lower_factor * _node_reduce(ext, "min", skip_first=True)
    nodes[0] = 0.0
    p = estimate_power(cloud.edges[1:], nodes[1:], lower=True)
    return decay, MonotoneEnvelope(cloud.edges, nodes, "none", "constant", origin_power=p, name="alpha5")


def check_decay(Ut: ScalarField, system, feedback: Callable, alpha5: MonotoneEnvelope, sampler: Sampler, d_max: float = 5.0) -> Certificate:
    """``grad Utilde . [f + g (K + d)] <= -alpha_5(|x|) + |d|`` at sampled ``(x, d)`` with ``|d| <= d_max``."""
    n, m = system.n, system.m
    X = sampler.ball(n, "decay-x")
    Dd = Sampler(seed=sampler.seed, radius=d_max, count=sampler.count).ball(m, "decay-d")
    u = feedback(X) + Dd
    rhs = system.rhs(X, u)
    lhs = np.sum(F.gradient(Ut, X) * rhs, axis=0)
    margin = -np.asarray(alpha5(np.linalg.norm(X, axis=0))) + np.linalg.norm(Dd, axis=0) - lhs
    return _certificate("decay", margin, np.concatenate([X, Dd]), sampler, ["decay"], tol=DECAY_TOL, details={"d_max": d_max})


@dataclass
class IISSResult:
    D: DFunction
    D_adjusted: DFunction
    Utilde: ScalarField
    U: ScalarField
    delta: Callable
    decay: ScalarField
    alpha5: MonotoneEnvelope
    halvings: int
    certificates: dict

    @property
    def verdict(self) -> str:
        return "pass-on-region" if all(c.passed for c in self.certificates.values()) else "fail"

    def to_json(self) -> dict:
        grid = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 48)])
        integral = CumulativeIntegral(lambda p: 1.0 / self.D_adjusted(p), np.concatenate([[0.0], np.geomspace(1e-12, 1e12, 25)]))
        return {
            "verdict": self.verdict,
            "D": self.D.to_json(),
            "D_adjusted": self.D_adjusted.to_json(),
            "Utilde_table": {"U": grid.tolist(), "Utilde": np.asarray(integral(grid)).tolist()},
            "alpha5": self.alpha5.to_json(),
            "delta_halvings": self.halvings,
            "declared_divergence": self.D.declared_divergence,
            "certificates": {k: c.to_json() for k, c in self.certificates.items()},
        }


class _ScaledDelta:
    def __init__(self, base: DeltaFunction, scale: float):
        self.base = base
        self.scale = scale
        self.fn = Univariate(lambda s: scale * np.asarray(base(s)), self.derivative, name="delta")

    def derivative(self, s):
        return self.scale * self.base.derivative(s)

    def __call__(self, s):
        return self.fn(s)


def build_iiss(res: SynthesisResult, D: DFunction, sampler: Sampler | None = None, d_max: float = 5.0) -> IISSResult:
    """Full iISS construction on top of an affine synthesis.

    ``delta`` is halved (up to 8 times) until ``|L_g U| <= D'(U)`` holds at
    the samples; halving keeps every upper bound on ``delta`` and ``delta'``.
    """
    lie = res.lie
    settings = res.settings
    sampler = sampler or Sampler(seed=settings.seed, radius=settings.region_radius, count=settings.fresh_samples)
    certs = {"H3": validate_D(D, lie.V, lie.LgV, sampler)}
    Dp = adjust_D_for_U(D)
    X = sampler.ball(lie.n, "U-input-gain")
    scale = 1.0
    halvings = 0
    while True:
        delta = _ScaledDelta(res.delta, scale)
        U = build_U(lie.V, lie.LGV, delta) if scale != 1.0 else res.U
        LgU = F.lie_derivatives(U, lie.system.g)
        key = check_key_bound(U, LgU, Dp, X, sampler)
        if key.passed or halvings >= MAX_HALVINGS:
            break
        scale *= 0.5
        halvings += 1
    key.details["delta_halvings"] = halvings
    certs["U-input-gain"] = key
    Ut = build_tildeU(U, Dp)
    LgUt = F.lie_derivatives(Ut, lie.system.g)
    Xk = sampler.ball(lie.n, "Utilde-input-gain")
    lg = np.linalg.norm(np.stack([np.asarray(c(Xk)) for c in LgUt]), axis=0)
    certs["Utilde-input-gain"] = _certificate("Utilde-input-gain", 1.0 - lg, Xk, sampler, ["|LgUtilde|<=1"])
    decay, alpha5 = iiss_decay_field(Ut, lie.system, res.feedback.generic, settings)
    certs["decay"] = check_decay(Ut, lie.system, res.feedback, alpha5, sampler, d_max)
    return IISSResult(D, Dp, Ut, U, delta, decay, alpha5, halvings, certs)


def _inverse_inertia_bounds(md: MechanicalData, sampler: Sampler) -> tuple[float, float]:
    d = md.dof
    Q = sampler.ball(d, "inertia-q")
    Minv = np.asarray([[np.broadcast_to(np.asarray(F.base_value(e), dtype=float), (Q.shape[1],)) for e in row] for row in md.Minv(list(Q))])
    eig = np.linalg.eigvalsh(np.transpose(Minv, (2, 0, 1)))
    return float(eig.min()), float(eig.max())


def hamiltonian_D(md: MechanicalData, sampler: Sampler, lam_lo: float | None = None, lam_hi: float | None = None) -> DFunction:
    """``D(s) = sqrt(2 (lam_hi^2 / lam_lo)(s + 1))`` from spectral bounds of ``M^{-1}``.

    Bounds not supplied are estimated from sampled spectra.
    """
    if lam_lo is None or lam_hi is None:
        lo, hi = _inverse_inertia_bounds(md, sampler)
        lam_lo = lo if lam_lo is None else lam_lo
        lam_hi = hi if lam_hi is None else lam_hi
    c = 2.0 * lam_hi**2 / lam_lo
    return DFunction(lambda s: F.sqrt(c * (s + 1.0)), True, "D", f"sqrt({c!r}*(s+1))")


def check_hamiltonian_bound(V: ScalarField, LgV: list, lam_lo: float, lam_hi: float, sampler: Sampler) -> Certificate:
    """``|L_g V|^2 <= 2 (lam_hi^2 / lam_lo) V`` at samples."""
    X = sampler.ball(V.n, "ham-bound")
    lg2 = np.sum(np.stack([np.asarray(c(X)) for c in LgV]) ** 2, axis=0)
    margin = 2.0 * lam_hi**2 / lam_lo * np.asarray(V(X)) - lg2
    return _certificate("hamiltonian-LgV", margin, X, sampler, ["|LgV|^2<=2(lam_hi^2/lam_lo)V"])
