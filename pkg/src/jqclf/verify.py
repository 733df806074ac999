"""Sampling-based checks of the standing assumptions and of constructed fields.

Every check returns a :class:`Certificate`. A failing certificate always
carries a witness point at which the violated inequality can be
re-evaluated. Passing verdicts are "pass-on-region": they hold at the
sampled points of the ball ``|x| <= R`` and claim nothing beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import fields as F
from .envelopes import MonotoneEnvelope
from .fields import ScalarField, VectorField
from .sampling import Sampler, rng_for

__all__ = [
    "Certificate",
    "check_H1",
    "check_H2",
    "check_weak_jq",
    "check_negative_definite",
    "gradient_crosscheck",
    "check_nonpositive",
    "minimize_residual",
]

H1_TOL = 1e-12


@dataclass
class Certificate:
    """Outcome of one sampled check."""

    name: str
    verdict: str
    radius: float
    samples: int
    seed: int
    worst_margin: float
    witness: list | None = None
    constraint_ids: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict != "fail"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "verdict": self.verdict,
            "region_radius": self.radius,
            "samples": self.samples,
            "seed": self.seed,
            "worst_margin": _json_float(self.worst_margin),
            "witness": self.witness,
            "constraint_ids": list(self.constraint_ids),
            "details": _jsonable(self.details),
            "notes": list(self.notes),
        }


def _json_float(v):
    v = float(v)
    if np.isfinite(v):
        return v
    return "inf" if v > 0 else ("-inf" if v < 0 else "nan")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _json_float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _certificate(name, margin, X, sampler, ids, tol=0.0, details=None, notes=None, strict=False) -> Certificate:
    """Verdict from per-point margins (pass iff margin >= -tol, or > 0 if strict)."""
    margin = np.asarray(margin, dtype=float)
    count = int(margin.size)
    if count == 0:
        return Certificate(name, "pass-on-region", sampler.radius, 0, sampler.seed, float("inf"), None, list(ids), details or {}, (notes or []) + ["no applicable samples"])
    bad_nan = ~np.isfinite(margin)
    if np.any(bad_nan):
        j = int(np.flatnonzero(bad_nan)[0])
        return Certificate(name, "fail", sampler.radius, count, sampler.seed, float("nan"), X[:, j].tolist(), list(ids), details or {}, (notes or []) + ["non-finite value"])
    j = int(np.argmin(margin))
    worst = float(margin[j])
    ok = worst > 0 if strict else worst >= -tol
    return Certificate(
        name,
        "pass-on-region" if ok else "fail",
        sampler.radius,
        count,
        sampler.seed,
        worst,
        None if ok else X[:, j].tolist(),
        list(ids),
        details or {},
        notes or [],
    )


# ---------------------------------------------------------------------------

def check_H1(
    V: ScalarField,
    f: VectorField,
    sampler: Sampler,
    n_shells: int = 16,
    starts: int = 64,
    r_min: float = 1e-2,
    zero_tol: float = 1e-12,
) -> Certificate:
    """``V(0) = 0``, ``V > 0`` away from 0, growth of sphere minima, ``L_f V <= 0``.

    ``L_f V <= 0`` is accepted up to ``1e-12`` relative to the size of the
    terms of the sum ``grad V . f`` (absolute for terms below 1). Positivity
    is also checked at the end points of a descent of ``V^2`` from ``starts``
    random points with ``|x| >= r_min``; values within ``zero_tol`` of 0 count
    as zeros.
    """
    n = V.n
    X = sampler.ball(n, "H1")
    notes = []
    v0 = float(V(np.zeros(n)))
    # descend V^2 away from the origin to reach zeros the random sample misses
    X0 = Sampler(seed=sampler.seed, radius=sampler.radius, exclude_origin=r_min).ball(n, "H1-starts", starts)
    Xd, _ = minimize_residual([V], X0, iters=60, radius=sampler.radius, r_min=r_min)
    X = np.concatenate([X, Xd], axis=1)
    gV = F.gradient(V, X)
    fx = f(X)
    LfV = np.sum(gV * fx, axis=0)
    scale = np.maximum(1.0, np.sum(np.abs(gV * fx), axis=0))
    lf_margin = H1_TOL * scale - LfV
    r = np.linalg.norm(X, axis=0)
    Vx = np.asarray(V(X))
    pos = np.where(r > 0, Vx - zero_tol, np.inf)
    # sphere minima must grow with the radius
    radii = np.geomspace(sampler.radius * 1e-3, sampler.radius, n_shells)
    rng = rng_for(sampler.seed, "H1-shells")
    dirs = rng.standard_normal((n, 256 * n))
    dirs /= np.linalg.norm(dirs, axis=0)
    shell_min = np.array([float(np.min(V(dirs * s))) for s in radii])
    growth = np.diff(shell_min)
    details = {
        "V(0)": v0,
        "min_V_nonzero": float(np.min(Vx[r > 0])) if np.any(r > 0) else None,
        "max_LfV": float(np.max(LfV)),
        "shell_radii": radii.tolist(),
        "shell_min_V": shell_min.tolist(),
        "LfV_tolerance": "1e-12 * max(1, sum_i |dV/dx_i f_i|)",
        "descent_starts": starts,
        "r_min": r_min,
    }
    margin = np.minimum(lf_margin, pos)
    cert = _certificate("H1", margin, X, sampler, ["V(0)=0", "V>0", "radial-growth", "LfV<=0"], details=details, notes=notes)
    if abs(v0) > 1e-12:
        cert.verdict = "fail"
        cert.witness = [0.0] * n
        cert.worst_margin = -abs(v0)
        cert.notes.append("V(0) != 0")
    elif cert.passed and np.any(pos <= 0):
        cert.verdict = "fail"
    if cert.passed and np.any(growth <= 0):
        k = int(np.flatnonzero(growth <= 0)[0])
        cert.verdict = "fail"
        cert.witness = (dirs[:, int(np.argmin(V(dirs * radii[k + 1])))] * radii[k + 1]).tolist()
        cert.worst_margin = float(growth[k])
        cert.notes.append(f"sphere minimum of V does not grow between radii {radii[k]:.4g} and {radii[k + 1]:.4g}")
    return cert


def _jacobian_rows(fields_: Sequence[ScalarField], X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residual vector ``(k, B)`` and its Jacobian ``(k, n, B)``."""
    r = np.stack([np.asarray(s(X), dtype=float) for s in fields_])
    J = np.stack([F.gradient(s, X) for s in fields_])
    return r, J


def minimize_residual(fields_: Sequence[ScalarField], X0: np.ndarray, iters: int = 60, radius=None, r_min=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Levenberg-Marquardt descent of ``sum_k fields_k(x)^2`` from every column of ``X0``.

    Points are kept inside ``r_min <= |x| <= radius`` by radial projection;
    both bounds may be scalars or one value per start. Returns the final
    points and squared residual norms.
    """
    r_min = np.asarray(r_min, dtype=float)
    X = np.array(X0, dtype=float)
    n, B = X.shape
    lam = np.full(B, 1e-3)
    r, J = _jacobian_rows(fields_, X)
    cost = np.sum(r * r, axis=0)
    for _ in range(iters):
        Jt = np.transpose(J, (2, 0, 1))  # (B, k, n)
        A = np.einsum("bki,bkj->bij", Jt, Jt)
        gvec = np.einsum("bki,kb->bi", Jt, r)
        diag = np.einsum("bii->bi", A)
        A = A + (lam[:, None] * np.maximum(diag, 1e-12) + 1e-300)[:, :, None] * np.eye(n)[None]
        try:
            step = np.linalg.solve(A, -gvec[:, :, None])[:, :, 0].T
        except np.linalg.LinAlgError:
            step = -gvec.T * 1e-3
        cand = X + step
        nrm = np.linalg.norm(cand, axis=0)
        if radius is not None:
            cand = np.where(nrm > radius, cand * (radius / np.maximum(nrm, 1e-300)), cand)
        if np.any(r_min > 0):
            nrm = np.linalg.norm(cand, axis=0)
            cand = np.where(nrm < r_min, cand * (r_min / np.maximum(nrm, 1e-300)), cand)
        rc, Jc = _jacobian_rows(fields_, cand)
        cc = np.sum(rc * rc, axis=0)
        better = np.isfinite(cc) & (cc < cost)
        X = np.where(better, cand, X)
        r = np.where(better, rc, r)
        J = np.where(better, Jc, J)
        cost = np.where(better, cc, cost)
        lam = np.where(better, lam * 0.3, lam * 10.0)
        lam = np.clip(lam, 1e-12, 1e12)
    return X, cost


def check_H2(
    V: ScalarField,
    f: VectorField,
    g: Sequence[VectorField],
    G: VectorField,
    sampler: Sampler,
    tube_tol: float = 1e-3,
    r_min: float = 1e-2,
    starts: int = 4096,
    min_tube: int = 16,
) -> Certificate:
    """``min(L_f L_G V, L_f V) < 0`` on the near-kernel tube ``|L_g V| <= tube_tol``.

    Tube points come from rejection sampling plus descent of ``|L_g V|^2``
    started at random points with ``|x| >= r_min``.
    """
    n = V.n
    LgV = F.lie_derivatives(V, g)
    LfV = F.lie_derivative(V, f)
    LGV = F.lie_derivative(V, G)
    LfLGV = F.lie_derivative(LGV, f)
    X = sampler.ball(n, "H2")
    rng_start = Sampler(seed=sampler.seed, radius=sampler.radius, exclude_origin=r_min)
    X0 = rng_start.ball(n, "H2-starts", starts)
    Xmin, _ = minimize_residual(LgV, X0, iters=40, radius=sampler.radius, r_min=r_min)
    notes = []
    tol = tube_tol
    for attempt in range(2):
        cand = np.concatenate([X, Xmin], axis=1)
        lg = np.linalg.norm(np.stack([np.asarray(c(cand)) for c in LgV]), axis=0)
        rr = np.linalg.norm(cand, axis=0)
        tube = cand[:, (lg <= tol) & (rr >= r_min)]
        if tube.shape[1] >= min_tube or attempt == 1:
            break
        tol *= 10.0
        notes.append(f"tube sampling starved at tolerance {tube_tol:g}; widened once to {tol:g}")
    val = np.minimum(np.asarray(LfLGV(tube)) if tube.size else np.zeros(0), np.asarray(LfV(tube)) if tube.size else np.zeros(0))
    details = {"tube_tol": tol, "r_min": r_min, "tube_points": int(tube.shape[1]), "starts": starts}
    if tube.shape[1] < min_tube:
        notes.append("tube remains sparsely sampled after widening")
    return _certificate("H2", -val, tube, sampler, ["min(LfLGV, LfV) < 0 on tube"], details=details, notes=notes, strict=True)


def check_weak_jq(
    V: ScalarField,
    f: VectorField,
    g: Sequence[VectorField],
    l: int,
    sampler: Sampler,
    restarts: int = 64,
    zero_tol: float = 1e-3,
    residual_tol: float = 1e-10,
) -> Certificate:
    """Joint zeros of ``L_f V`` and ``L_{ad_f^i g_k} V`` (``i <= l``) lie within ``zero_tol`` of 0."""
    if l > F.MAX_BRACKET_DEPTH:
        raise ValueError(f"bracket depth {l} exceeds the autodiff depth budget {F.MAX_BRACKET_DEPTH}")
    n = V.n
    funcs = [F.lie_derivative(V, f)]
    ids = ["LfV"]
    for i in range(l + 1):
        for k, gk in enumerate(g):
            funcs.append(F.lie_derivative(V, F.iterated_ad(f, gk, i)))
            ids.append(f"L_ad^{i}_f g{k + 1} V")
    X0 = Sampler(seed=sampler.seed, radius=sampler.radius).ball(n, "weak-jq", restarts)
    X, cost = minimize_residual(funcs, X0, iters=200, radius=sampler.radius)
    r = np.linalg.norm(X, axis=0)
    # fail when a start converges to an exact joint zero away from the origin
    bad = (cost < residual_tol) & (r > zero_tol)
    margin = np.where(bad, -r, np.maximum(cost, 0.0) + np.where(r <= zero_tol, 1.0, 0.0))
    details = {"l": l, "restarts": restarts, "zero_tol": zero_tol, "residual_tol": residual_tol, "functions": ids, "best_residual": float(np.min(cost))}
    cert = _certificate("weak-JQ", margin, X, sampler, ids, details=details, strict=True)
    return cert


def check_negative_definite(
    field_: ScalarField | Callable,
    sampler: Sampler,
    margin_env: MonotoneEnvelope | Callable | None = None,
    n: int | None = None,
    name: str = "negative-definite",
    stream: str = "negdef",
    tol: float = 1e-9,
    starts: int = 64,
    r_min: float = 1e-2,
    zero_tol: float = 1e-12,
) -> Certificate:
    """``field(x) < 0`` at sampled ``x != 0``; with a margin, ``field <= -margin + tol``.

    ``margin_env`` is an envelope in ``|x|`` or a function of ``x``. Without
    a margin, a multi-start descent of ``field^2`` over ``|x| >= r_min``
    supplements the random sample.
    """
    n = n or field_.n
    X = sampler.ball(n, stream)
    X = X[:, np.linalg.norm(X, axis=0) > 0]
    if margin_env is None:
        if isinstance(field_, ScalarField) and starts > 0:
            # descend field^2 to reach zeros the random sample misses
            X0 = Sampler(seed=sampler.seed, radius=sampler.radius, exclude_origin=r_min).ball(n, stream + "-starts", starts)
            Xd, _ = minimize_residual([field_], X0, iters=60, radius=sampler.radius, r_min=r_min)
            X = np.concatenate([X, Xd], axis=1)
        val = np.asarray(field_(X), dtype=float)
        # values within zero_tol of 0 count as zeros of the field
        return _certificate(name, -val - zero_tol, X, sampler, ["field < 0"], strict=True, details={"descent_starts": starts, "r_min": r_min, "zero_tol": zero_tol})
    val = np.asarray(field_(X), dtype=float)
    if isinstance(margin_env, MonotoneEnvelope):
        m = np.asarray(margin_env(np.linalg.norm(X, axis=0)))
    else:
        m = np.asarray(margin_env(X), dtype=float)
    return _certificate(name, -m - val, X, sampler, ["field <= -margin + tol"], tol=tol)


def check_nonpositive(fields_: dict, sampler: Sampler, n: int, name: str = "nonpositive", stream: str = "nonpos") -> Certificate:
    """Every named field is ``<= 0`` at the samples."""
    X = sampler.ball(n, stream)
    vals = np.stack([np.asarray(fn(X), dtype=float) for fn in fields_.values()])
    return _certificate(name, -np.max(vals, axis=0), X, sampler, list(fields_), details={k: float(np.max(v)) for k, v in zip(fields_, vals)})


def _fd_gradient(fn: Callable, X: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    out = np.empty_like(X)
    for i in range(n):
        e = np.zeros((n, 1))
        e[i] = 1.0
        out[i] = (np.asarray(fn(X + e * h)) - np.asarray(fn(X - e * h))) / (2.0 * h)
    return out


def gradient_crosscheck(fields_: Sequence[ScalarField], sampler: Sampler, h: float = 1e-5, stream: str = "fd", floor: float = 1e-2) -> dict:
    """Autodiff gradients against central differences with step ``h``.

    Points whose error exceeds ``1e-10`` are retried with Richardson
    extrapolation at steps ``h`` to ``1e4 h`` (decades), keeping per point the
    estimate whose two half-step differences agree best (chosen without
    looking at the autodiff value). The error is ``|ad - fd|_inf / max(|ad|_inf, floor)``:
    relative for gradients above ``floor``, absolute (scaled by ``1/floor``)
    near zeros of the gradient.
    """
    out = {"fields": {}, "worst": 0.0, "worst_field": None, "worst_point": None}
    for fld in fields_:
        X = sampler.ball(fld.n, stream)
        hh = np.full(X.shape[1], h)
        ad = F.gradient(fld, X)
        fd = _fd_gradient(fld, X, hh)
        den = np.maximum(np.max(np.abs(ad), axis=0), floor)
        err = np.max(np.abs(ad - fd), axis=0) / den
        redo = err > 1e-10
        if np.any(redo):
            Xr = X[:, redo]
            hr = hh[redo]
            best = None
            spread = None
            for scale in (1.0, 10.0, 100.0, 1e3, 1e4):
                f1 = _fd_gradient(fld, Xr, scale * hr)
                f2 = _fd_gradient(fld, Xr, scale * hr / 2.0)
                rich = (4.0 * f2 - f1) / 3.0
                est = np.max(np.abs(f1 - f2), axis=0)
                if best is None:
                    best, spread = rich, est
                else:
                    take = est < spread
                    best[:, take] = rich[:, take]
                    spread = np.minimum(spread, est)
            err_r = np.max(np.abs(ad[:, redo] - best), axis=0) / den[redo]
            err[redo] = np.minimum(err[redo], err_r)
        j = int(np.argmax(err))
        name = fld.name or f"field{len(out['fields'])}"
        out["fields"][name] = {"worst": float(err[j]), "point": X[:, j].tolist(), "samples": int(X.shape[1])}
        if err[j] >= out["worst"]:
            out["worst"] = float(err[j])
            out["worst_field"] = name
            out["worst_point"] = X[:, j].tolist()
    return out
