"""Integration of open and closed loops with disturbances, plus trajectory bookkeeping."""

from __future__ import annotations

import math
from types import SimpleNamespace
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .systems import ControlAffineSystem, FullyNonlinearSystem
from .verify import Certificate, _certificate

__all__ = [
    "IntegrationError",
    "Disturbance",
    "Trajectory",
    "integrate",
    "simulate_closed_loop",
    "simulate_batch",
    "lyapunov_monotonicity",
    "iiss_trajectory_bound",
    "write_csv",
]

MIN_STEP = 1e-12
BLOWUP = 1e9
DISTURBANCE_KINDS = ("zero", "constant", "decaying-exponential", "sinusoid", "piecewise-table")


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float | None = None, state=None):
        self.t = t
        self.state = None if state is None else np.asarray(state, dtype=float)
        super().__init__(message)


@dataclass
class Disturbance:
    """Additive input disturbance ``d(t)`` with its energy ``int_0^t |d|``.

    Parameters by kind:
      constant: ``value``;
      decaying-exponential: ``amplitude``, ``rate`` (``d = amplitude * exp(-rate t)``);
      sinusoid: ``amplitude``, ``frequency``, ``phase`` (``d = amplitude * sin(frequency t + phase)``);
      piecewise-table: ``times`` (increasing, starting at 0) and ``values`` (held constant on each interval).
    """

    kind: str = "zero"
    params: dict = field(default_factory=dict)
    m: int = 1

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}; choose from {DISTURBANCE_KINDS}")
        p = self.params
        if self.kind == "constant":
            self._vec = self._vector(p["value"])
        elif self.kind in ("decaying-exponential", "sinusoid"):
            self._vec = self._vector(p["amplitude"])
        elif self.kind == "piecewise-table":
            self._times = np.asarray(p["times"], dtype=float)
            self._values = np.atleast_2d(np.asarray(p["values"], dtype=float))
            if self._values.shape[0] != len(self._times):
                self._values = self._values.T
            if self._values.shape != (len(self._times), self.m):
                raise ValueError("piecewise-table needs one value row of length m per time")
            if self._times[0] != 0 or np.any(np.diff(self._times) <= 0):
                raise ValueError("piecewise-table times must start at 0 and increase")
            seg = np.diff(self._times)
            norms = np.linalg.norm(self._values, axis=1)
            self._cum = np.concatenate([[0.0], np.cumsum(seg * norms[:-1])])

    def _vector(self, v) -> np.ndarray:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if v.size == 1 and self.m > 1:
            v = np.full(self.m, float(v[0]))
        if v.shape != (self.m,):
            raise ValueError(f"disturbance vector must have length m={self.m}")
        return v

    def __call__(self, t: float) -> np.ndarray:
        p = self.params
        if self.kind == "zero":
            return np.zeros(self.m)
        if self.kind == "constant":
            return self._vec.copy()
        if self.kind == "decaying-exponential":
            return self._vec * math.exp(-float(p.get("rate", 1.0)) * t)
        if self.kind == "sinusoid":
            return self._vec * math.sin(float(p.get("frequency", 1.0)) * t + float(p.get("phase", 0.0)))
        k = int(np.searchsorted(self._times, t, side="right") - 1)
        return self._values[max(k, 0)].copy()

    def energy(self, t) -> np.ndarray:
        """``int_0^t |d(s)| ds`` in closed form (Euclidean norm)."""
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind == "zero":
            return np.zeros_like(t)
        if self.kind == "constant":
            return np.linalg.norm(self._vec) * t
        if self.kind == "decaying-exponential":
            rate = float(p.get("rate", 1.0))
            a = np.linalg.norm(self._vec)
            return a * t if rate == 0 else -a * np.expm1(-rate * t) / rate
        if self.kind == "sinusoid":
            w = float(p.get("frequency", 1.0))
            ph = float(p.get("phase", 0.0))
            a = np.linalg.norm(self._vec)
            if w == 0:
                return a * abs(math.sin(ph)) * t
            if w < 0:
                w, ph = -w, -ph
            return a * _abs_sin_between(ph, w * t) / w
        k = np.clip(np.searchsorted(self._times, t, side="right") - 1, 0, len(self._times) - 1)
        norms = np.linalg.norm(self._values, axis=1)
        return self._cum[k] + (t - self._times[k]) * norms[k]

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params, "m": self.m}


def _abs_sin_between(theta0: float, span):
    """``int_theta0^{theta0 + span} |sin|`` for ``span >= 0``.

    Inside one half period the integral is ``2 |sin(mid) sin(span/2)|``,
    which stays accurate for tiny spans; full half periods contribute 2.
    """
    span = np.asarray(span, dtype=float)
    theta1 = theta0 + span
    k0 = math.floor(theta0 / math.pi)
    k1 = np.floor(theta1 / math.pi)
    same = 2.0 * np.abs(np.sin(theta0 + span / 2.0) * np.sin(span / 2.0))
    head = 1.0 + math.cos(theta0 - k0 * math.pi)
    tail = 1.0 - np.cos(theta1 - k1 * math.pi)
    split = head + 2.0 * (k1 - k0 - 1.0) + tail
    return np.where(k1 == k0, same, split)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n, T)
    inputs: np.ndarray  # (m, T)
    disturbances: np.ndarray  # (m, T)
    observables: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[:, -1]

    def summary(self) -> dict:
        u = np.linalg.norm(self.inputs, axis=0) if self.inputs.size else np.zeros(len(self.times))
        return {
            "final_time": float(self.times[-1]),
            "final_norm": float(np.linalg.norm(self.final_state)),
            "sup_input_norm": float(np.max(u)),
            "steps": int(self.stats.get("steps", len(self.times) - 1)),
            "rejected": int(self.stats.get("rejected", 0)),
        }


# ---------------------------------------------------------------------------
# integrators

_RKF_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_RKF_C = [0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2]
_RKF_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])
_RKF_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])


def _check_state(x, t):
    if not np.all(np.isfinite(x)):
        raise IntegrationError("state became non-finite", t, x)
    if np.linalg.norm(x) > BLOWUP:
        raise IntegrationError(f"state norm exceeded {BLOWUP:g} (blowup)", t, x)


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    x0,
    T: float,
    method: str = "rkf45",
    h: float | None = None,
    atol: float = 1e-9,
    rtol: float = 1e-9,
    max_steps: int = 10_000_000,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Integrate ``x' = rhs(t, x)`` on ``[0, T]``; returns ``(times, states (n, K), stats)``.

    ``rk4`` is the classical fixed-step scheme (step ``h``, last step
    shortened to land on ``T``). ``rkf45`` is Runge-Kutta-Fehlberg 4(5)
    advancing with the fifth-order solution under a mixed error norm
    ``max_i |err_i| / (atol + rtol max(|x_i|, |x_new_i|))``.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    x = np.array(x0, dtype=float)
    _check_state(x, 0.0)
    times = [0.0]
    states = [x.copy()]
    t = 0.0
    stats = {"method": method, "steps": 0, "rejected": 0}
    if method == "rk4":
        if h is None or h <= 0:
            raise ValueError("rk4 needs a positive step h")
        n_steps = int(math.ceil(T / h - 1e-12))
        for k in range(n_steps):
            dt = min(h, T - t)
            k1 = rhs(t, x)
            k2 = rhs(t + dt / 2, x + dt / 2 * k1)
            k3 = rhs(t + dt / 2, x + dt / 2 * k2)
            k4 = rhs(t + dt, x + dt * k3)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = T if k == n_steps - 1 else t + dt
            _check_state(x, t)
            times.append(t)
            states.append(x.copy())
        stats["steps"] = n_steps
        return np.array(times), np.array(states).T, stats
    if method != "rkf45":
        raise ValueError(f"unknown integration method {method!r}")
    dt = h if h is not None else min(1e-2, T)
    while t < T:
        if stats["steps"] + stats["rejected"] > max_steps:
            raise IntegrationError("maximum number of steps exceeded", t, x)
        dt = min(dt, T - t)
        if dt < MIN_STEP:
            raise IntegrationError(f"step size underflow (h < {MIN_STEP:g})", t, x)
        ks = []
        for i in range(6):
            xi = x.copy()
            for j, a in enumerate(_RKF_A[i]):
                xi = xi + dt * a * ks[j]
            ks.append(np.asarray(rhs(t + _RKF_C[i] * dt, xi), dtype=float))
        K = np.stack(ks)
        x5 = x + dt * (_RKF_B5 @ K)
        x4 = x + dt * (_RKF_B4 @ K)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x5))
        err = float(np.max(np.abs(x5 - x4) / scale)) if x.size else 0.0
        if not np.isfinite(err):
            err = np.inf
        if err <= 1.0:
            t = T if T - (t + dt) < 1e-14 * max(1.0, T) else t + dt
            x = x5
            _check_state(x, t)
            times.append(t)
            states.append(x.copy())
            stats["steps"] += 1
        else:
            stats["rejected"] += 1
        factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        dt = dt * factor
    return np.array(times), np.array(states).T, stats


# ---------------------------------------------------------------------------

def _system_rhs(system):
    if isinstance(system, ControlAffineSystem):
        return system.rhs
    if isinstance(system, FullyNonlinearSystem):
        return system
    raise TypeError("system must be a ControlAffineSystem or FullyNonlinearSystem")


def simulate_closed_loop(
    system,
    feedback: Callable[[np.ndarray], np.ndarray] | None,
    x0,
    T: float,
    disturbance: Disturbance | None = None,
    method: str = "rkf45",
    h: float | None = None,
    atol: float = 1e-9,
    rtol: float = 1e-9,
    observables: dict | None = None,
    hold: float | None = None,
) -> Trajectory:
    """``x' = F(x, K(x) + d(t))`` (``f + g (K + d)`` for affine systems).

    ``observables`` maps names to functions of states ``(n, K) -> (K,)``;
    they are evaluated on the recorded states after integration.
    ``hold`` enables a zero-order hold of the feedback with that period.
    """
    n, m = system.n, system.m
    disturbance = disturbance or Disturbance("zero", m=m)
    F = _system_rhs(system)
    fb = feedback or (lambda x: np.zeros(m))
    x0 = np.asarray(x0, dtype=float)

    def control(x):
        return np.asarray(fb(x), dtype=float).reshape(m)

    if hold is None:
        def rhs(t, x):
            return np.asarray(F(x, control(x) + disturbance(t)), dtype=float).reshape(n)

        times, states, stats = integrate(rhs, x0, T, method, h, atol, rtol)
        inputs = np.stack([control(states[:, k]) for k in range(states.shape[1])], axis=1) if m else np.zeros((0, states.shape[1]))
    else:
        times_l, states_l, inputs_l = [0.0], [x0], []
        stats = {"method": method, "steps": 0, "rejected": 0, "hold": hold}
        t0, x = 0.0, x0
        while t0 < T - 1e-14:
            seg = min(hold, T - t0)
            u_hold = control(x)

            def rhs(t, y, u_hold=u_hold, t0=t0):
                return np.asarray(F(y, u_hold + disturbance(t0 + t)), dtype=float).reshape(n)

            tt, ss, st = integrate(rhs, x, seg, method, h if h is None else min(h, seg), atol, rtol)
            times_l.extend((t0 + tt[1:]).tolist())
            states_l.extend(list(ss[:, 1:].T))
            inputs_l.extend([u_hold] * (len(tt) - 1))
            stats["steps"] += st["steps"]
            stats["rejected"] += st["rejected"]
            t0 += seg
            x = ss[:, -1]
        times = np.array(times_l)
        states = np.array(states_l).T
        inputs = np.stack([inputs_l[0] if inputs_l else control(x0)] + inputs_l, axis=1)
    dist = np.stack([disturbance(t) for t in times], axis=1) if m else np.zeros((0, len(times)))
    obs = {}
    for name, fn in (observables or {}).items():
        obs[name] = np.asarray(fn(states), dtype=float).reshape(len(times))
    obs["|u|"] = np.linalg.norm(inputs, axis=0)
    obs["|d|"] = np.linalg.norm(dist, axis=0)
    obs["energy"] = np.asarray(disturbance.energy(times), dtype=float)
    stats["disturbance"] = disturbance.to_json()
    return Trajectory(times, states, inputs, dist, obs, stats)


def simulate_batch(jobs: Sequence[dict], workers: int = 1) -> list:
    """Run independent ``simulate_closed_loop`` keyword sets; order-preserving."""
    if workers <= 1 or len(jobs) <= 1:
        return [simulate_closed_loop(**job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: simulate_closed_loop(**job), jobs))


def lyapunov_monotonicity(traj: Trajectory, W: Callable | str) -> float:
    """Largest increase ``W(x_{k+1}) - W(x_k)`` over consecutive samples (0 for one sample)."""
    w = traj.observables[W] if isinstance(W, str) else np.asarray(W(traj.states), dtype=float)
    if len(w) < 2:
        return 0.0
    return float(max(np.max(np.diff(w)), 0.0))


def iiss_trajectory_bound(traj: Trajectory, Utilde: Callable, seed: int = 0, radius: float = float("nan")) -> Certificate:
    """``Utilde(x(t)) <= Utilde(x(0)) + int_0^t |d| + 1e-6 (1 + t)`` on the time grid."""
    u = np.asarray(Utilde(traj.states), dtype=float)
    t = traj.times
    margin = u[0] + traj.observables["energy"] + 1e-6 * (1.0 + t) - u
    meta = SimpleNamespace(radius=radius, seed=seed)
    X = np.concatenate([t[None, :], traj.states])
    return _certificate("iiss-trajectory", margin, X, meta, ["Utilde(x(t)) <= Utilde(x0) + int|d| + 1e-6(1+t)"], details={"points": int(len(t))})


def write_csv(traj: Trajectory, path, columns: Sequence[str] = ("V", "Vsharp", "Utilde")) -> list:
    """CSV with header ``t,x1..,u1..,d1..`` then the built observables; 17 significant digits."""
    n, m = traj.states.shape[0], traj.inputs.shape[0]
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{k + 1}" for k in range(m)] + [f"d{k + 1}" for k in range(m)]
    cols = [traj.times[None, :], traj.states, traj.inputs, traj.disturbances]
    for name in columns:
        if name in traj.observables:
            header.append(name)
            cols.append(traj.observables[name][None, :])
    data = np.concatenate(cols, axis=0).T
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    return header
