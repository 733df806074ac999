"""Constructive synthesis of a strict CLF and a small damping feedback.

The pipeline, for a system satisfying the weak damping-controllability setting
(``L_f V <= 0`` plus an auxiliary field ``G`` ruling out degenerate
kernels), is:

1. radial envelopes ``alpha_1 .. alpha_4`` of ``V``, ``|L_G V|`` and ``|grad V|``;
2. margin functions ``rho``, ``Gamma = rho / 2``, ``N = rho / 4`` from the
   negative definite function ``S``;
3. in the fully nonlinear case, a gain bound ``xibar`` that keeps the
   higher-order input terms dominated;
4. the damping gain ``xi`` (capped so ``|u| <= epsilon``), the level-set
   caps on ``delta``, the shape ``delta_a``, the weight ``omega`` and the
   integral ``delta(s) = int_{s/2}^s delta_a(l) delta_a(2l) omega(l) / (1 + 4 l^2) dl``;
5. ``U = V + delta(V) L_G V``, the correction ``Omega = 4 Delta`` and the
   CLF ``Vsharp = U + int_0^V Omega``, with feedback ``u = -xi(V) L_g V^T``.

All "for every x" requirements are reduced to one-variable bounds on
level sets or spheres by sampling, with safety factors, and re-verified
on a fresh sample of the region ``|x| <= R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import fields as F
from .envelopes import (
    CumulativeIntegral,
    MonotoneEnvelope,
    Univariate,
    band_extrema,
    estimate_power,
    nondecreasing_majorant,
    nondecreasing_minorant,
    nonincreasing_minorant,
    strictly_increasing,
)
from .fields import Dual, ScalarField, VectorField
from .sampling import Sampler, rng_for, unit_directions
from .systems import ControlAffineSystem, FullyNonlinearSystem, affine_from_nonlinear, remainder_h

__all__ = [
    "Settings",
    "SynthesisError",
    "LieData",
    "RadialEnvelopes",
    "estimate_radial_envelopes",
    "margin_functions",
    "LevelCloud",
    "levelset_envelope",
    "build_xi_affine",
    "build_H_table",
    "build_xibar_nonlinear",
    "build_delta_caps",
    "build_delta_a",
    "build_P",
    "build_omega",
    "DeltaFunction",
    "build_delta",
    "build_U",
    "build_Delta_Omega",
    "build_clf",
    "Feedback",
    "build_feedback",
    "SynthesisResult",
    "synthesize",
    "reverify",
    "CONSTRAINT_IDS",
]

CONSTRAINT_IDS = ("delta-sandwich", "delta-slope", "drift-cross-N", "input-cross-N", "input-coupling-N", "drift-cross-Gamma", "input-cross-Gamma")
DECAY_TOL = 1e-9


class SynthesisError(RuntimeError):
    """Pipeline abort; carries the constraint id, level and witness when known."""

    def __init__(self, message: str, constraint: str | None = None, level: float | None = None, witness=None):
        self.constraint = constraint
        self.level = level
        self.witness = None if witness is None else np.asarray(witness, dtype=float)
        super().__init__(message)


@dataclass
class Settings:
    """Knobs of the construction; defaults follow the documented choices."""

    epsilon: float = 1.0
    xi_max: float = 1.0
    region_radius: float = 10.0
    seed: int = 0
    n_radii: int = 64
    n_levels: int = 64
    sphere_samples: int | None = None
    level_samples: int | None = None
    fresh_samples: int = 10_000
    eps_A: float = 1e-12
    lower_factor: float = 0.9
    upper_factor: float = 1.1
    polish_keep: int = 16
    polish_iters: int = 40
    kernel_starts: int = 8
    input_grid: int = 16
    h_state_samples: int = 48
    workers: int = 1

    def per_band(self, n: int, which: str) -> int:
        val = self.sphere_samples if which == "sphere" else self.level_samples
        return int(val) if val is not None else 256 * n

    def to_json(self) -> dict:
        # the worker count never changes a result, so it is not recorded
        out = asdict(self)
        out.pop("workers")
        return out


# ---------------------------------------------------------------------------
# Lie-derivative bundle

class LieData:
    """All Lie derivatives of ``V`` and ``L_G V`` used by the construction."""

    def __init__(self, system: ControlAffineSystem, V: ScalarField, G: VectorField):
        self.system = system
        self.V = V
        self.G = G
        self.n = system.n
        self.m = system.m
        self.LfV = F.lie_derivative(V, system.f)
        self.LgV = F.lie_derivatives(V, system.g)
        self.LGV = F.lie_derivative(V, G)
        self.LfLGV = F.lie_derivative(self.LGV, system.f)
        self.LgLGV = F.lie_derivatives(self.LGV, system.g)

    def LgV_row(self, x) -> np.ndarray:
        return np.stack([np.asarray(c(x)) for c in self.LgV])

    def LgV_norm(self, x) -> np.ndarray:
        return np.linalg.norm(self.LgV_row(x), axis=0)

    def LgLGV_norm(self, x) -> np.ndarray:
        return np.linalg.norm(np.stack([np.asarray(c(x)) for c in self.LgLGV]), axis=0)

    def gradV_norm(self, x) -> np.ndarray:
        return np.linalg.norm(F.gradient(self.V, x), axis=0)

    def S(self, x) -> np.ndarray:
        return np.minimum(0.0, self.LfLGV(x)) + np.minimum(0.0, self.LfV(x)) - self.LgV_norm(x)


# ---------------------------------------------------------------------------
# sampling helpers

def _polish(fn, pts, lo, hi, member, mode, rng, iters, vals=None):
    """Random local search moving points toward an extremum inside their band.

    ``member(points) -> band coordinate`` and the band is ``[lo, hi]`` per point.
    Returns the improved objective values.
    """
    sign = 1.0 if mode == "min" else -1.0
    pts = pts.copy()
    obj = sign * (fn(pts) if vals is None else vals)
    scale = np.maximum(np.linalg.norm(pts, axis=0), 1e-300)
    step = 0.05 * scale
    for _ in range(iters):
        cand = pts + step * unit_directions(rng, pts.shape[0], pts.shape[1]) * rng.uniform(0.2, 1.0, pts.shape[1])
        c = member(cand)
        ok = (c >= lo) & (c <= hi)
        cv = np.full(pts.shape[1], np.inf)
        if np.any(ok):
            cv[ok] = sign * fn(cand[:, ok])
        better = ok & (cv < obj)
        pts[:, better] = cand[:, better]
        obj[better] = cv[better]
        step = np.where(better, step * 1.5, step * 0.6)
    return sign * obj, pts


class _BandCloud:
    """Sampled points grouped in bands ``[edges[k], edges[k+1]]`` of a coordinate."""

    def __init__(self, points: list, edges: np.ndarray, member: Callable, settings: Settings, stream: str):
        self.points = points
        self.edges = edges
        self.member = member
        self.settings = settings
        self.stream = stream
        self.all = np.concatenate(points, axis=1)
        self.band_index = np.concatenate([np.full(p.shape[1], k) for k, p in enumerate(points)])
        self._cache: dict = {}

    @property
    def n_bands(self) -> int:
        return len(self.points)

    def values(self, key: str, fn: Callable) -> list:
        if key not in self._cache:
            mapper = Sampler(seed=self.settings.seed, workers=self.settings.workers)
            vals = np.asarray(mapper.map_blocks(lambda X: np.asarray(fn(X), dtype=float), self.all), dtype=float)
            if not np.all(np.isfinite(vals)):
                bad = np.flatnonzero(~np.isfinite(vals))[0]
                raise SynthesisError(f"non-finite value of {key} at a sample", witness=self.all[:, bad])
            self._cache[key] = vals
        vals = self._cache[key]
        return [vals[self.band_index == k] for k in range(self.n_bands)]

    def band_extremes(self, key: str, fn: Callable, mode: str, polish: bool = True) -> tuple[np.ndarray, list]:
        """Per-band extremum (refined by local search) and its location."""
        per_band = self.values(key, fn)
        ext = np.empty(self.n_bands)
        where = []
        keep = self.settings.polish_keep
        sel_pts, sel_lo, sel_hi, sel_band, sel_vals = [], [], [], [], []
        for k, vals in enumerate(per_band):
            order = np.argsort(vals if mode == "min" else -vals)
            ext[k] = vals[order[0]]
            where.append(self.points[k][:, order[0]])
            idx = order[:keep]
            sel_pts.append(self.points[k][:, idx])
            sel_vals.append(vals[idx])
            sel_lo.append(np.full(len(idx), self.edges[k]))
            sel_hi.append(np.full(len(idx), self.edges[k + 1]))
            sel_band.append(np.full(len(idx), k))
        if polish and self.settings.polish_iters > 0:
            pts = np.concatenate(sel_pts, axis=1)
            rng = rng_for(self.settings.seed, f"{self.stream}-polish-{key}")
            vals, moved = _polish(
                fn,
                pts,
                np.concatenate(sel_lo),
                np.concatenate(sel_hi),
                self.member,
                mode,
                rng,
                self.settings.polish_iters,
                vals=np.concatenate(sel_vals),
            )
            band = np.concatenate(sel_band)
            for k in range(self.n_bands):
                mask = band == k
                if not np.any(mask):
                    continue
                j = np.argmin(vals[mask]) if mode == "min" else np.argmax(vals[mask])
                v = vals[mask][j]
                if (mode == "min" and v < ext[k]) or (mode == "max" and v > ext[k]):
                    ext[k] = v
                    where[k] = moved[:, mask][:, j]
        return ext, where


def _geometric_grid(top: float, count: int, ratio: float) -> np.ndarray:
    """``[0, top*ratio, ..., top]`` with ``count`` nodes, geometric after 0."""
    return np.concatenate([[0.0], np.geomspace(top * ratio, top, count - 1)])


def _node_reduce(per_band: np.ndarray, mode: str, skip_first: bool = False) -> np.ndarray:
    return band_extrema([np.array([v]) for v in per_band], mode, skip_first)


def _class_kinf(bp: np.ndarray, nodes: np.ndarray, lower: bool, name: str) -> MonotoneEnvelope:
    nodes = np.array(nodes, dtype=float)
    nodes[0] = 0.0
    body = nondecreasing_minorant(nodes[1:]) if lower else nondecreasing_majorant(nodes[1:])
    body = strictly_increasing(body, lower=lower)
    if lower and body[0] <= 0:
        raise SynthesisError(f"{name}: lower envelope is not positive away from the origin")
    if not lower:
        body = np.maximum(body, 1e-300)
        body = strictly_increasing(body, lower=False)
    values = np.concatenate([[0.0], body])
    p = estimate_power(bp[1:], values[1:], lower=lower)
    return MonotoneEnvelope(bp, values, "nondecreasing", "linear", origin_power=p, class_kinf=True, name=name)


# ---------------------------------------------------------------------------
# step 1: radial envelopes

@dataclass
class RadialEnvelopes:
    alpha1: MonotoneEnvelope
    alpha2: MonotoneEnvelope
    alpha3: MonotoneEnvelope
    alpha4: MonotoneEnvelope
    radii: np.ndarray

    def to_json(self) -> dict:
        return {k: getattr(self, k).to_json() for k in ("alpha1", "alpha2", "alpha3", "alpha4")}


def radial_cloud(n: int, settings: Settings, stream: str = "radial") -> _BandCloud:
    R = settings.region_radius
    radii = _geometric_grid(R, settings.n_radii, 1e-4)
    count = settings.per_band(n, "sphere")
    sampler = Sampler(seed=settings.seed, radius=R)
    pts = [sampler.sphere_band(n, radii[k], radii[k + 1], count, f"{stream}-{k}") for k in range(len(radii) - 1)]
    member = lambda x: np.linalg.norm(x, axis=0)
    return _BandCloud(pts, radii, member, settings, stream)


def estimate_radial_envelopes(
    V: ScalarField,
    LGV_abs: Callable,
    gradV_norm: Callable,
    settings: Settings,
    cloud: _BandCloud | None = None,
) -> RadialEnvelopes:
    """``alpha_1 <= V <= alpha_2``, ``|L_G V| <= alpha_3``, ``|grad V| <= alpha_4`` in ``|x|``."""
    cloud = cloud or radial_cloud(V.n, settings)
    radii = cloud.edges
    lo, hi = settings.lower_factor, settings.upper_factor
    vmin, where = cloud.band_extremes("V", V, "min")
    bad = np.flatnonzero(vmin[1:] <= 0)
    if len(bad):
        k = bad[0] + 1
        raise SynthesisError("V is not positive definite: sampled minimum <= 0 away from 0", witness=where[k])
    a1 = _class_kinf(radii, lo * _node_reduce(vmin, "min", skip_first=True), True, "alpha1")
    vmax, _ = cloud.band_extremes("V", V, "max")
    a2 = _class_kinf(radii, hi * _node_reduce(vmax, "max"), False, "alpha2")
    gmax, _ = cloud.band_extremes("|LGV|", LGV_abs, "max")
    a3 = _class_kinf(radii, hi * _node_reduce(gmax, "max"), False, "alpha3")
    dmax, _ = cloud.band_extremes("|gradV|", gradV_norm, "max")
    a4 = _class_kinf(radii, hi * _node_reduce(dmax, "max"), False, "alpha4")
    return RadialEnvelopes(a1, a2, a3, a4, radii)


# ---------------------------------------------------------------------------
# step 2: margin functions

@dataclass
class MarginFunctions:
    rho: MonotoneEnvelope
    Gamma: MonotoneEnvelope
    N: MonotoneEnvelope

    def to_json(self) -> dict:
        return {"rho": self.rho.to_json(), "Gamma": self.Gamma.to_json(), "N": self.N.to_json()}


def _kernel_minima(lie: LieData, cloud: _BandCloud, settings: Settings, smin: np.ndarray, where: list, tol: float = 1e-9) -> None:
    """Lower ``smin`` with ``-S`` at points of each band descended onto ``L_g V = 0``.

    The kernel of ``L_g V`` has measure zero, so random band samples miss
    it; there ``-S`` is smallest. A kernel point with
    ``min(L_f L_G V, L_f V) >= 0`` is a direct counterexample.
    """
    from .verify import minimize_residual

    k_starts = settings.kernel_starts
    if k_starts <= 0:
        return
    X0 = np.concatenate([p[:, :k_starts] for p in cloud.points], axis=1)
    band = np.concatenate([np.full(min(k_starts, p.shape[1]), k) for k, p in enumerate(cloud.points)])
    lo, hi = cloud.edges[band], cloud.edges[band + 1]
    X, _ = minimize_residual(lie.LgV, X0, iters=40, radius=hi, r_min=lo)
    r = np.linalg.norm(X, axis=0)
    inside = (r >= lo * (1.0 - 1e-12)) & (r <= hi * (1.0 + 1e-12)) & (r > 0)
    vals = np.asarray(-lie.S(X), dtype=float)
    on_kernel = inside & (lie.LgV_norm(X) <= tol * np.maximum(1.0, r))
    key = np.minimum(np.asarray(lie.LfLGV(X)), np.asarray(lie.LfV(X)))
    bad = np.flatnonzero(on_kernel & (key >= 0))
    if len(bad):
        raise SynthesisError(
            "min(L_f L_G V, L_f V) >= 0 at a zero of L_g V (the auxiliary-field condition fails)",
            constraint="H2",
            witness=X[:, bad[0]],
        )
    for k in range(cloud.n_bands):
        mask = inside & (band == k)
        if np.any(mask):
            j = int(np.argmin(np.where(mask, vals, np.inf)))
            if vals[j] < smin[k]:
                smin[k] = vals[j]
                where[k] = X[:, j]


def margin_functions(lie: LieData, settings: Settings, cloud: _BandCloud | None = None) -> MarginFunctions:
    """``rho(s) <= min_{|x|=s} -S(x)`` with ``Gamma = rho/2``, ``N = rho/4``."""
    cloud = cloud or radial_cloud(lie.n, settings)
    negS = lambda x: -lie.S(x)
    smin, where = cloud.band_extremes("-S", negS, "min")
    _kernel_minima(lie, cloud, settings, smin, where)
    bad = np.flatnonzero(smin[1:] <= 0)
    if len(bad):
        k = bad[0] + 1
        raise SynthesisError(
            "S is not negative definite on the sampled sphere band (the auxiliary-field condition fails)",
            constraint="H2",
            witness=where[k],
        )
    nodes = settings.lower_factor * _node_reduce(smin, "min", skip_first=True)
    nodes[0] = 0.0
    p = estimate_power(cloud.edges[1:], nodes[1:], lower=True)
    rho = MonotoneEnvelope(cloud.edges, nodes, "none", "constant", origin_power=p, name="rho")
    return MarginFunctions(rho, rho.scaled(0.5, "Gamma"), rho.scaled(0.25, "N"))


# ---------------------------------------------------------------------------
# level sets

class LevelCloud(_BandCloud):
    """Points on level sets of ``V`` grouped in level bands.

    Each point lies on a ray from the origin at an exact level drawn
    inside its band, located by bisection between the radii given by the
    radial sandwich (with a doubling fallback).
    """

    @classmethod
    def build(cls, V: ScalarField, levels: np.ndarray, alpha1: MonotoneEnvelope, alpha2: MonotoneEnvelope, settings: Settings, stream: str = "level") -> "LevelCloud":
        n = V.n
        count = settings.per_band(n, "level")
        pts = []
        for k in range(len(levels) - 1):
            rng = rng_for(settings.seed, f"{stream}-{k}")
            d = unit_directions(rng, n, count)
            a, b = levels[k], levels[k + 1]
            if a > 0:
                target = np.exp(rng.uniform(np.log(a), np.log(b), count))
            else:
                target = rng.uniform(0.0, b, count)
                target[0] = b * 1e-6
            pts.append(d * _ray_solve(V, d, target, alpha1, alpha2))
        member = lambda x: np.asarray(V(x), dtype=float)
        return cls(pts, levels, member, settings, stream)


def _ray_solve(V: ScalarField, d: np.ndarray, target: np.ndarray, alpha1, alpha2, iters: int = 80) -> np.ndarray:
    lo = np.asarray(alpha2.inverse(target), dtype=float) * 0.999
    hi = np.asarray(alpha1.inverse(target), dtype=float) * 1.001 + 1e-300
    # make sure the bracket is valid even if the envelopes were optimistic
    for _ in range(200):
        short = V(d * hi) < target
        if not np.any(short):
            break
        hi = np.where(short, hi * 2.0, hi)
    for _ in range(200):
        over = V(d * lo) > target
        if not np.any(over):
            break
        lo = np.where(over, lo * 0.5, lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = V(d * mid) >= target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def level_grid(alpha2: MonotoneEnvelope, settings: Settings) -> np.ndarray:
    vmax = float(alpha2(settings.region_radius))
    return _geometric_grid(vmax, settings.n_levels, 1e-8)


def levelset_envelope(
    field: Callable,
    cloud: LevelCloud,
    mode: str,
    key: str,
    factor: float | None = None,
    hull: str = "none",
    skip_first: bool = False,
    settings: Settings | None = None,
) -> MonotoneEnvelope:
    """Envelope of ``min``/``max`` of ``field`` over level sets of ``V``.

    Node ``k`` combines the two level bands adjacent to ``v_k`` so that
    interpolation never leaves the sampled range. ``hull`` applies a
    monotone hull appropriate to the envelope's use.
    """
    settings = settings or cloud.settings
    if factor is None:
        factor = settings.lower_factor if mode == "min" else settings.upper_factor
    ext, _ = cloud.band_extremes(key, field, mode)
    nodes = _windowed_scale(_node_reduce(ext, mode, skip_first), factor)
    if skip_first:
        nodes[0] = nodes[1]
    if hull == "nonincreasing":
        nodes = nonincreasing_minorant(nodes) if mode == "min" else np.maximum.accumulate(nodes[::-1])[::-1]
        mono = "nonincreasing"
    elif hull == "nondecreasing":
        nodes = nondecreasing_minorant(nodes) if mode == "min" else nondecreasing_majorant(nodes)
        mono = "nondecreasing"
    else:
        mono = "none"
    return MonotoneEnvelope(cloud.edges, nodes, mono, "constant", name=key)


def _windowed_scale(nodes: np.ndarray, factor: float) -> np.ndarray:
    # safety factor applied away from zero: v - 0.1|v| for lower, v + 0.1|v| for upper
    return nodes + (factor - 1.0) * np.abs(nodes)


# ---------------------------------------------------------------------------
# step 3: gain bounds

def build_xi_affine(lie: LieData, cloud: LevelCloud, settings: Settings) -> tuple[MonotoneEnvelope, MonotoneEnvelope]:
    """``xi = min(xi_max, epsilon / max_{V=v} |L_g V|)`` with nonincreasing hull.

    Returns ``(xi, LgV_max)`` where ``LgV_max`` is the level-set maximum envelope.
    """
    ext, _ = cloud.band_extremes("|LgV|", lie.LgV_norm, "max")
    M = _windowed_scale(_node_reduce(ext, "max"), settings.upper_factor)
    with np.errstate(divide="ignore"):
        cap = np.where(M > 0, settings.epsilon / np.where(M > 0, M, 1.0), np.inf)
    # the rounded quotient may overshoot the cap by an ulp
    cap = np.where(cap * M > settings.epsilon, np.nextafter(cap, 0.0), cap)
    xi = nonincreasing_minorant(np.minimum(settings.xi_max, cap))
    Menv = MonotoneEnvelope(cloud.edges, M, "none", "constant", name="LgV_max")
    return MonotoneEnvelope(cloud.edges, xi, "nonincreasing", "constant", name="xi"), Menv


class HTable:
    """Piecewise-constant upper bound ``H(v, mu)`` with ``|h(x,u) u| <= H(V(x), |u|) |u|^2``.

    Nondecreasing in both arguments: ``H(v, mu)`` is the largest sampled
    ratio over the level bands below the first level node ``>= v`` and the
    input bands below the first input node ``>= mu``.
    """

    def __init__(self, levels: np.ndarray, inputs: np.ndarray, table: np.ndarray):
        self.levels = np.asarray(levels, dtype=float)
        self.inputs = np.asarray(inputs, dtype=float)
        self.table = np.asarray(table, dtype=float)

    def __call__(self, v, mu) -> np.ndarray:
        v = np.asarray(F.base_value(v), dtype=float)
        mu = np.asarray(F.base_value(mu), dtype=float)
        i = np.clip(np.searchsorted(self.levels, v, side="left"), 0, len(self.levels) - 1)
        j = np.clip(np.searchsorted(self.inputs, mu, side="left"), 0, len(self.inputs) - 1)
        return self.table[i, j]

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.table == 0))

    def to_json(self) -> dict:
        return {"levels": self.levels.tolist(), "inputs": self.inputs.tolist(), "table": self.table.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "HTable":
        return cls(data["levels"], data["inputs"], data["table"])

    @classmethod
    def zero(cls, levels: np.ndarray, inputs: np.ndarray) -> "HTable":
        return cls(levels, inputs, np.zeros((len(levels), len(inputs))))


def build_H_table(sysF: FullyNonlinearSystem, cloud: LevelCloud, settings: Settings, mu_max: float) -> HTable:
    """Sample ``|h(x,u) u| / |u|^2`` on level bands x input-norm bands."""
    inputs = _geometric_grid(mu_max, settings.input_grid + 1, 1e-3)
    nb_v, nb_u = cloud.n_bands, len(inputs) - 1
    raw = np.zeros((nb_v, nb_u))
    per = settings.h_state_samples
    m = sysF.m
    for k in range(nb_v):
        rng = rng_for(settings.seed, f"H-{k}")
        pts = cloud.points[k]
        idx = rng.choice(pts.shape[1], size=min(per, pts.shape[1]), replace=False)
        X = np.repeat(pts[:, idx], nb_u, axis=1)
        band = np.tile(np.arange(nb_u), len(idx))
        lo, hi = inputs[band], inputs[band + 1]
        mu = np.where(lo > 0, np.exp(rng.uniform(np.log(np.maximum(lo, 1e-300)), np.log(hi))), rng.uniform(hi * 1e-3, hi))
        # include the band's upper edge so the table covers it
        mu[:: max(1, len(idx))] = hi[:: max(1, len(idx))]
        Uin = unit_directions(rng, m, X.shape[1]) * mu
        h = remainder_h(sysF, X, Uin)  # (n, m, B)
        hu = np.einsum("nmb,mb->nb", h, Uin)
        ratio = np.linalg.norm(hu, axis=0) / mu**2
        for j in range(nb_u):
            sel = band == j
            raw[k, j] = ratio[sel].max()
    raw = _windowed_scale(raw, settings.upper_factor)
    # cumulative maxima: node i covers bands < i (node 0 reuses node 1)
    cum = np.maximum.accumulate(np.maximum.accumulate(raw, axis=0), axis=1)
    table = np.zeros((nb_v + 1, nb_u + 1))
    table[1:, 1:] = cum
    table[0, :] = table[1, :]
    table[:, 0] = table[:, 1]
    return HTable(cloud.edges, inputs, table)


def build_xibar_nonlinear(
    lie: LieData,
    H: HTable,
    radial: RadialEnvelopes,
    cloud: LevelCloud,
    settings: Settings,
) -> tuple[MonotoneEnvelope, MonotoneEnvelope]:
    """Largest ``xibar`` per level with ``alpha_4(alpha_1^{-1}(v)) H(v, xibar M) xibar <= 1/2``.

    ``M`` bounds ``|L_g V|`` on the level band; ``xibar`` is also capped so
    the feedback norm stays below ``epsilon``. Returns ``(xibar, LgV_max)``.
    """
    xi_cap, Menv = build_xi_affine(lie, cloud, settings)
    levels = cloud.edges
    M = Menv.values
    K = len(levels)
    out = np.empty(K)
    for k in range(K):
        v_hi = levels[min(k + 1, K - 1)]
        scale = float(radial.alpha4(radial.alpha1.inverse(v_hi)))
        cap = float(xi_cap.values[k])

        def lhs(xi):
            return scale * float(H(v_hi, xi * M[k])) * xi

        if lhs(cap) <= 0.5:
            out[k] = cap
            continue
        lo, hi = 0.0, cap
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if lhs(mid) <= 0.5:
                lo = mid
            else:
                hi = mid
        if lo <= 0:
            raise SynthesisError("no positive gain satisfies the higher-order input bound", constraint="remainder-gain", level=float(v_hi))
        out[k] = lo * (1.0 - 1e-9)
    out = nonincreasing_minorant(out)
    return MonotoneEnvelope(levels, out, "nonincreasing", "constant", name="xibar"), Menv


# ---------------------------------------------------------------------------
# step 5: delta

@dataclass
class DeltaCaps:
    levels: np.ndarray
    cap: np.ndarray
    per_constraint: dict
    active: list
    origin_power: float

    def to_json(self) -> dict:
        return {
            "levels": self.levels.tolist(),
            "cap": self.cap.tolist(),
            "per_constraint": {k: v.tolist() for k, v in self.per_constraint.items()},
            "active": self.active,
            "origin_power": self.origin_power,
        }


def constraint_terms(lie: LieData, margins: MarginFunctions, xibar: MonotoneEnvelope) -> dict:
    """Mixed constraints ``delta(V)^p A(x) <= B(x)`` as ``id -> (p, A, B)``."""
    nrm = lambda x: np.linalg.norm(x, axis=0)
    N, Gam = margins.N, margins.Gamma
    xb = lambda x: xibar(np.asarray(lie.V(x)))
    lglgv2 = lambda x: lie.LgLGV_norm(x) ** 2
    return {
        "drift-cross-N": (1, lie.LfLGV, lambda x: N(nrm(x)) / 8.0),
        "input-cross-N": (2, lambda x: xb(x) * lglgv2(x), lambda x: N(nrm(x)) / 8.0),
        "input-coupling-N": (1, lambda x: xb(x) * lglgv2(x), lambda x: N(nrm(x)) / 2.0),
        "drift-cross-Gamma": (1, lie.LfLGV, lambda x: Gam(nrm(x)) ** 2 * xb(x) / 8.0),
        "input-cross-Gamma": (2, lglgv2, lambda x: Gam(nrm(x)) ** 2 / 8.0),
    }


def cap_sandwich(radial: RadialEnvelopes, v_num, v_den):
    """``alpha_1(alpha_2^{-1}(v_num)) / (1 + 2 alpha_3(alpha_1^{-1}(v_den)))``."""
    num = radial.alpha1(radial.alpha2.inverse(v_num))
    den = 1.0 + 2.0 * radial.alpha3(radial.alpha1.inverse(v_den))
    return num / den


def build_delta_caps(
    lie: LieData,
    radial: RadialEnvelopes,
    margins: MarginFunctions,
    xibar: MonotoneEnvelope,
    cloud: LevelCloud,
    settings: Settings,
) -> DeltaCaps:
    """Pointwise caps on ``delta`` at the level nodes (node 0 excluded)."""
    levels = cloud.edges
    K = len(levels)
    per = {}
    lo_idx = np.maximum(np.arange(K) - 1, 1)
    hi_idx = np.minimum(np.arange(K) + 1, K - 1)
    c7 = np.asarray(cap_sandwich(radial, levels[lo_idx], levels[hi_idx]), dtype=float)
    c7[0] = np.nan
    per["delta-sandwich"] = c7
    for cid, (p, A, B) in constraint_terms(lie, margins, xibar).items():
        bmin, _ = cloud.band_extremes(f"B-{cid}", B, "min")
        amax, _ = cloud.band_extremes(f"A-{cid}", A, "max")
        bn = _windowed_scale(_node_reduce(bmin, "min", skip_first=True), settings.lower_factor)
        an = _windowed_scale(_node_reduce(amax, "max", skip_first=True), settings.upper_factor)
        ratio = bn / np.maximum(an, settings.eps_A)
        # delta^p <= ratio; a nonpositive ratio stays nonpositive and flags infeasibility
        per[cid] = ratio if p == 1 else np.sign(ratio) * np.sqrt(np.abs(ratio))
    stack = np.stack([per[c] for c in per])
    cap = np.min(stack[:, 1:], axis=0)
    active = [list(per)[int(i)] for i in np.argmin(stack[:, 1:], axis=0)]
    bad = np.flatnonzero(~(cap > 0))
    if len(bad):
        k = bad[0] + 1
        raise SynthesisError(
            f"constraint system infeasible at sampled resolution ({active[k - 1]} at level {levels[k]:.6g})",
            constraint=active[k - 1],
            level=float(levels[k]),
        )
    cap = np.concatenate([[0.0], cap])
    p = estimate_power(levels[1:], cap[1:], lower=True)
    return DeltaCaps(levels, cap, per, ["-"] + active, p)


def build_delta_a(caps: DeltaCaps) -> MonotoneEnvelope:
    """Shape below the caps: nondecreasing (and below ``v/(1+v)``) on ``[0, 1]``, nonincreasing after."""
    levels, cap = caps.levels, caps.cap
    bp = levels.copy()
    c = cap.copy()
    if levels[1] < 1.0 < levels[-1] and not np.any(levels == 1.0):
        j = np.searchsorted(levels, 1.0) - 1
        c1 = min(cap[j], cap[j + 1]) if j >= 1 else cap[j + 1]
        bp = np.insert(bp, j + 1, 1.0)
        c = np.insert(c, j + 1, c1)
    vals = np.zeros_like(bp)
    left = (bp > 0) & (bp <= 1.0)
    if np.any(left):
        cl = nondecreasing_minorant(c[left])
        vals[left] = np.minimum(bp[left] / (1.0 + bp[left]), cl)
    right = bp > 1.0
    if np.any(right):
        top = vals[left][-1] if np.any(left) else min(1.0, c[right][0])
        vals[right] = np.minimum(top, nonincreasing_minorant(c[right]))
    vals = np.minimum(vals, 1.0)
    vals[0] = 0.0
    if np.any(vals[1:] <= 0):
        raise SynthesisError("delta_a vanishes at a positive level", constraint="delta_a")
    p = max(caps.origin_power, 1.0)
    return MonotoneEnvelope(bp, vals, "none", "constant", origin_power=p, name="delta_a")


def build_P(lie: LieData, cloud: LevelCloud, settings: Settings) -> MonotoneEnvelope:
    """``P(v) <= inf_{V=v} 1 / (1 + 4 |L_G V|)``."""
    ext, _ = cloud.band_extremes("|LGV|", lambda x: np.abs(lie.LGV(x)), "max")
    M = _windowed_scale(_node_reduce(ext, "max"), settings.upper_factor)
    return MonotoneEnvelope(cloud.edges, 1.0 / (1.0 + 4.0 * M), "none", "constant", name="P")


def build_omega(P: MonotoneEnvelope) -> MonotoneEnvelope:
    """Positive nonincreasing ``omega <= min(P(s), P(2s), 1) / 2``.

    Node ``k`` takes the smallest ``P`` node value able to influence
    ``[v_k, 2 v_{k+1}]``, so the bound also holds between nodes.
    """
    bp, pv = P.breakpoints, P.values
    K = len(bp)
    nodes = np.empty(K)
    for k in range(K):
        a = bp[k]
        b = 2.0 * bp[min(k + 1, K - 1)]
        lo = max(np.searchsorted(bp, a, side="right") - 1, 0)
        hi = min(np.searchsorted(bp, b, side="left"), K - 1)
        nodes[k] = 0.5 * min(1.0, float(np.min(pv[lo: hi + 1])))
    nodes = nonincreasing_minorant(nodes)
    if np.any(nodes <= 0):
        raise SynthesisError("omega is not positive (P vanishes)")
    return MonotoneEnvelope(bp, nodes, "nonincreasing", "constant", name="omega")


class DeltaFunction:
    """``delta(s) = int_{s/2}^{s} phi``, ``phi(l) = delta_a(l) delta_a(2l) omega(l) / (1 + 4 l^2)``.

    Derivative ``delta'(s) = phi(s) - phi(s/2) / 2``; everything accepts duals.
    """

    def __init__(self, delta_a: MonotoneEnvelope, omega: MonotoneEnvelope):
        self.delta_a = delta_a
        self.omega = omega
        knots = np.concatenate([delta_a.breakpoints, delta_a.breakpoints / 2.0, omega.breakpoints])
        self._c_inf = float(delta_a.values[-1] ** 2 * omega.values[-1])
        self.Phi = CumulativeIntegral(self.phi, knots, tail=self._tail)
        self.fn = Univariate(self._value, self.derivative, name="delta")

    def phi(self, l):
        da, om = self.delta_a.evaluate, self.omega.evaluate
        return da(l) * da(2.0 * l) * om(l) / (1.0 + 4.0 * l * l)

    def _tail(self, a, t):
        return 0.5 * self._c_inf * (np.arctan(2.0 * t) - np.arctan(2.0 * a))

    def _value(self, s):
        s = np.asarray(s, dtype=float)
        return self.Phi(s) - self.Phi(0.5 * s)

    def derivative(self, s):
        return self.phi(s) - 0.5 * self.phi(0.5 * s)

    def __call__(self, s):
        return self.fn(s)

    def to_json(self) -> dict:
        return {"delta_a": self.delta_a.to_json(), "omega": self.omega.to_json()}

    @classmethod
    def from_json(cls, data: dict) -> "DeltaFunction":
        return cls(MonotoneEnvelope.from_json(data["delta_a"]), MonotoneEnvelope.from_json(data["omega"]))


def build_delta(delta_a: MonotoneEnvelope, omega: MonotoneEnvelope) -> DeltaFunction:
    return DeltaFunction(delta_a, omega)


def build_U(V: ScalarField, LGV: ScalarField, delta: Callable) -> ScalarField:
    """``U(x) = V(x) + delta(V(x)) L_G V(x)``."""

    def fn(x):
        v = V.fn(x)
        return v + delta(v) * LGV.fn(x)

    return ScalarField(fn, V.n, name="U")


def build_Delta_Omega(
    U: ScalarField,
    lie: LieData,
    H: HTable,
    xibar: MonotoneEnvelope,
    cloud: LevelCloud,
    settings: Settings,
) -> tuple[MonotoneEnvelope, MonotoneEnvelope]:
    """``Delta`` bounds ``|grad U| H(V, xibar |L_g V|) xibar`` on level sets; ``Omega = 4 Delta``."""
    levels = cloud.edges
    if H.is_zero:
        zero = MonotoneEnvelope(levels, np.zeros(len(levels)), "nondecreasing", "constant", name="Delta")
        return zero, zero.scaled(4.0, "Omega")

    def term(x):
        v = np.asarray(lie.V(x))
        xb = xibar(v)
        return np.linalg.norm(F.gradient(U, x), axis=0) * H(v, xb * lie.LgV_norm(x)) * xb

    ext, _ = cloud.band_extremes("Delta", term, "max")
    nodes = nondecreasing_majorant(_windowed_scale(_node_reduce(ext, "max"), settings.upper_factor))
    Delta = MonotoneEnvelope(levels, nodes, "nondecreasing", "constant", name="Delta")
    return Delta, Delta.scaled(4.0, "Omega")


def build_clf(V: ScalarField, Omega: MonotoneEnvelope, U: ScalarField) -> ScalarField:
    """``Vsharp(x) = U(x) + int_0^{V(x)} Omega``."""
    if np.all(Omega.values == 0) and Omega.tail_slope == 0:
        return ScalarField(U.fn, U.n, name="Vsharp")
    integral = Omega.integral()
    return ScalarField(lambda x: U.fn(x) + integral(V.fn(x)), V.n, name="Vsharp")


class Feedback:
    """``u(x) = -xi(V(x)) L_g V(x)^T``."""

    def __init__(self, lie: LieData, xi: MonotoneEnvelope):
        self.lie = lie
        self.xi = xi
        self.m = lie.m
        self.n = lie.n

    def generic(self, x: list) -> list:
        gain = self.xi.evaluate(self.lie.V.fn(x))
        return [-gain * c.fn(x) for c in self.lie.LgV]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        gain = self.xi(np.asarray(self.lie.V(x)))
        return -gain * self.lie.LgV_row(x)


def build_feedback(lie: LieData, xi: MonotoneEnvelope) -> Feedback:
    return Feedback(lie, xi)


# ---------------------------------------------------------------------------
# result and re-verification

@dataclass
class ConstraintMargin:
    id: str
    margin: float
    worst_point: list
    samples: int
    tolerance: float = 0.0
    note: str = ""

    @property
    def ok(self) -> bool:
        return bool(self.margin >= -self.tolerance)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = self.ok
        return d


@dataclass
class SynthesisResult:
    kind: str
    settings: Settings
    radial: RadialEnvelopes
    margins: MarginFunctions
    levels: np.ndarray
    xibar: MonotoneEnvelope
    xi: MonotoneEnvelope
    LgV_max: MonotoneEnvelope
    H: HTable
    caps: DeltaCaps
    delta_a: MonotoneEnvelope
    P: MonotoneEnvelope
    omega: MonotoneEnvelope
    delta: DeltaFunction
    Delta: MonotoneEnvelope
    Omega: MonotoneEnvelope
    lie: LieData
    U: ScalarField
    Vsharp: ScalarField
    feedback: Feedback
    sysF: FullyNonlinearSystem | None = None
    constraint_report: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "pass-on-region" if all(c.ok for c in self.constraint_report) else "fail"

    def closed_loop_field(self) -> VectorField:
        """Closed-loop vector field (fully nonlinear dynamics when present)."""
        if self.sysF is not None:
            Ffn = self.sysF.F_fn
            return VectorField(lambda x: Ffn(x, self.feedback.generic(x)), self.lie.n, name="closed-loop")
        return self.lie.system.closed_loop(self.feedback.generic)

    def delta_table(self) -> dict:
        s = self.levels
        return {
            "s": s.tolist(),
            "delta": np.asarray(self.delta(s)).tolist(),
            "delta_prime": np.asarray(self.delta.derivative(s)).tolist(),
            "delta_a": np.asarray(self.delta_a(s)).tolist(),
            "P": np.asarray(self.P(s)).tolist(),
            "omega": np.asarray(self.omega(s)).tolist(),
        }

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "verdict": self.verdict,
            "settings": self.settings.to_json(),
            "region": {"radius": self.settings.region_radius, "fresh_samples": self.settings.fresh_samples},
            "seed": self.settings.seed,
            "levels": self.levels.tolist(),
            "envelopes": {
                **self.radial.to_json(),
                **self.margins.to_json(),
                "xibar": self.xibar.to_json(),
                "xi": self.xi.to_json(),
                "LgV_max": self.LgV_max.to_json(),
                "delta_a": self.delta_a.to_json(),
                "P": self.P.to_json(),
                "omega": self.omega.to_json(),
                "Delta": self.Delta.to_json(),
                "Omega": self.Omega.to_json(),
            },
            "H_table": self.H.to_json(),
            "delta_caps": self.caps.to_json(),
            "delta_table": self.delta_table(),
            "constraint_report": [c.to_json() for c in self.constraint_report],
        }

    @classmethod
    def from_json(cls, data: dict, system: ControlAffineSystem, V: ScalarField, G: VectorField, sysF: FullyNonlinearSystem | None = None) -> "SynthesisResult":
        """Rebuild every constructed function from a certificate."""
        env = {k: MonotoneEnvelope.from_json(v) for k, v in data["envelopes"].items()}
        settings = Settings(**data["settings"])
        lie = LieData(system, V, G)
        radial = RadialEnvelopes(env["alpha1"], env["alpha2"], env["alpha3"], env["alpha4"], env["alpha1"].breakpoints)
        margins = MarginFunctions(env["rho"], env["Gamma"], env["N"])
        caps_d = data["delta_caps"]
        caps = DeltaCaps(
            np.array(caps_d["levels"]),
            np.array(caps_d["cap"]),
            {k: np.array(v) for k, v in caps_d["per_constraint"].items()},
            caps_d["active"],
            caps_d["origin_power"],
        )
        delta = DeltaFunction(env["delta_a"], env["omega"])
        U = build_U(V, lie.LGV, delta)
        res = cls(
            kind=data["kind"],
            settings=settings,
            radial=radial,
            margins=margins,
            levels=np.array(data["levels"]),
            xibar=env["xibar"],
            xi=env["xi"],
            LgV_max=env["LgV_max"],
            H=HTable.from_json(data["H_table"]),
            caps=caps,
            delta_a=env["delta_a"],
            P=env["P"],
            omega=env["omega"],
            delta=delta,
            Delta=env["Delta"],
            Omega=env["Omega"],
            lie=lie,
            U=U,
            Vsharp=build_clf(V, env["Omega"], U),
            feedback=build_feedback(lie, env["xi"]),
            sysF=sysF,
        )
        res.constraint_report = [
            ConstraintMargin(c["id"], c["margin"], c["worst_point"], c["samples"], c["tolerance"], c.get("note", ""))
            for c in data["constraint_report"]
        ]
        return res


def _worst(cid: str, margin: np.ndarray, X: np.ndarray, tol: float = 0.0, note: str = "", mask=None) -> ConstraintMargin:
    if mask is not None:
        margin = np.where(mask, margin, np.inf)
    count = int(np.sum(mask)) if mask is not None else int(margin.size)
    if count == 0 or not np.any(np.isfinite(margin)):
        return ConstraintMargin(cid, float("inf"), [], count, tol, note or "no applicable samples")
    j = int(np.nanargmin(margin))
    return ConstraintMargin(cid, float(margin[j]), X[:, j].tolist(), count, tol, note)


def evaluate_margins(res: SynthesisResult, X: np.ndarray) -> dict:
    """All re-verification margins at the points ``X`` (arrays keyed by id)."""
    lie, radial, mg = res.lie, res.radial, res.margins
    r = np.linalg.norm(X, axis=0)
    V = np.asarray(lie.V(X))
    LfV = np.asarray(lie.LfV(X))
    LgV = lie.LgV_norm(X)
    LGV = np.asarray(lie.LGV(X))
    LfLGV = np.asarray(lie.LfLGV(X))
    LgLGV2 = lie.LgLGV_norm(X) ** 2
    d = np.asarray(res.delta(V))
    dp = np.asarray(res.delta.derivative(V))
    xb = np.asarray(res.xibar(V))
    N = np.asarray(mg.N(r))
    Gam = np.asarray(mg.Gamma(r))
    out = {}
    out["delta-sandwich"] = cap_sandwich(radial, V, V) - d
    out["delta-slope"] = dp * LGV + 0.25
    out["drift-cross-N"] = N / 8.0 - d * LfLGV
    out["input-cross-N"] = N / 8.0 - xb * d**2 * LgLGV2
    out["input-coupling-N"] = N / 2.0 - d * xb * LgLGV2
    out["drift-cross-Gamma"] = Gam**2 * xb / 8.0 - d * LfLGV
    out["input-cross-Gamma"] = Gam**2 / 8.0 - d**2 * LgLGV2
    out["U-positive"] = np.asarray(res.U(X)) - 0.5 * radial.alpha1(radial.alpha2.inverse(V))
    out["cover"] = np.maximum.reduce([LgV - Gam, -N - LfV, -N - LfLGV])
    affine_cl = lie.system.closed_loop(res.feedback.generic)
    Udot = np.asarray(F.lie_derivative(res.U, affine_cl)(X))
    case1 = (LgV <= Gam) & (LfV <= -N)
    case2 = (LgV <= Gam) & (LfLGV <= -N)
    case3 = LgV >= Gam
    out["case1"] = (-0.25 * N - Udot, case1)
    out["case2"] = (-0.5 * d * N - Udot, case2)
    out["case3"] = (-0.25 * xb * Gam**2 - Udot, case3)
    cl = res.closed_loop_field()
    Vsdot = np.asarray(F.lie_derivative(res.Vsharp, cl)(X))
    out["Vsharp-positive"] = (np.asarray(res.Vsharp(X)), r > 0)
    out["Vsharp-decrease"] = (-Vsdot, r > 0)
    u = res.feedback(X)
    out["feedback-cap"] = res.settings.epsilon - np.linalg.norm(u, axis=0)
    if res.sysF is not None:
        Hs = np.asarray(radial.alpha4(radial.alpha1.inverse(V))) * res.H(V, xb * LgV)
        out["remainder-gain"] = 0.5 - Hs * xb
        Fx = res.sysF(X, u)
        Vdot = np.sum(F.gradient(lie.V, X) * Fx, axis=0)
        xi = np.asarray(res.xi(V))
        out["nonlinear-decrease"] = LfV - 0.5 * xi * LgV**2 - Vdot
    return out


_TOLERANCES = {"case1": DECAY_TOL, "case2": DECAY_TOL, "case3": DECAY_TOL}


def reverify(res: SynthesisResult, count: int | None = None, stream: str = "fresh") -> list:
    """Margins of every requirement on a fresh sample of the region."""
    count = res.settings.fresh_samples if count is None else count
    sampler = Sampler(seed=res.settings.seed, radius=res.settings.region_radius, count=count)
    X = sampler.ball(res.lie.n, stream)
    margins = evaluate_margins(res, X)
    report = []
    for cid, val in margins.items():
        if isinstance(val, tuple):
            arr, mask = val
        else:
            arr, mask = val, None
        strict = cid in ("Vsharp-decrease", "Vsharp-positive")
        cm = _worst(cid, np.asarray(arr, dtype=float), X, _TOLERANCES.get(cid, 0.0), mask=mask)
        if strict and cm.margin <= 0:
            cm.tolerance = -np.finfo(float).tiny  # strict inequality
        report.append(cm)
    return report


def synthesize(
    system: ControlAffineSystem | FullyNonlinearSystem,
    V: ScalarField,
    G: VectorField,
    settings: Settings | None = None,
    verify: bool = True,
) -> SynthesisResult:
    """Run the full construction; fully nonlinear systems get the ``xibar``/``Omega`` corrections."""
    settings = settings or Settings()
    sysF = system if isinstance(system, FullyNonlinearSystem) and system._affine is None else None
    affine = affine_from_nonlinear(system) if isinstance(system, FullyNonlinearSystem) else system
    lie = LieData(affine, V, G)

    rcloud = radial_cloud(lie.n, settings)
    radial = estimate_radial_envelopes(V, lambda x: np.abs(lie.LGV(x)), lie.gradV_norm, settings, rcloud)
    margins = margin_functions(lie, settings, rcloud)

    levels = level_grid(radial.alpha2, settings)
    lcloud = LevelCloud.build(V, levels, radial.alpha1, radial.alpha2, settings)

    if sysF is not None:
        H = build_H_table(sysF, lcloud, settings, settings.epsilon)
        xibar, Menv = build_xibar_nonlinear(lie, H, radial, lcloud, settings)
    else:
        H = HTable.zero(levels, _geometric_grid(settings.epsilon, settings.input_grid + 1, 1e-3))
        xibar, Menv = build_xi_affine(lie, lcloud, settings)
    xi = xibar

    caps = build_delta_caps(lie, radial, margins, xi, lcloud, settings)
    delta_a = build_delta_a(caps)
    P = build_P(lie, lcloud, settings)
    omega = build_omega(P)
    delta = build_delta(delta_a, omega)
    U = build_U(V, lie.LGV, delta)
    Delta, Omega = build_Delta_Omega(U, lie, H, xi, lcloud, settings)
    Vsharp = build_clf(V, Omega, U)
    feedback = build_feedback(lie, xi)

    res = SynthesisResult(
        kind="nonlinear" if sysF is not None else "affine",
        settings=settings,
        radial=radial,
        margins=margins,
        levels=levels,
        xibar=xibar,
        xi=xi,
        LgV_max=Menv,
        H=H,
        caps=caps,
        delta_a=delta_a,
        P=P,
        omega=omega,
        delta=delta,
        Delta=Delta,
        Omega=Omega,
        lie=lie,
        U=U,
        Vsharp=Vsharp,
        feedback=feedback,
        sysF=sysF,
    )
    if verify:
        res.constraint_report = reverify(res)
    return res
