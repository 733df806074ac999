import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from jqclf.sim import (
    Disturbance,
    IntegrationError,
    integrate,
    iiss_trajectory_bound,
    lyapunov_monotonicity,
    simulate_batch,
    simulate_closed_loop,
    write_csv,
)

X0_MANIP = [3.0, -2.0, 1.5, -1.0]


def decay(t, x):
    return -x


def rk4_error(h):
    _, xs, _ = integrate(decay, [1.0], 1.0, "rk4", h=h)
    return abs(xs[0, -1] - math.exp(-1.0))


def test_rk4_exponential():
    assert rk4_error(0.01) <= 1e-6
    assert abs(math.exp(-1.0) - 0.3678794412) <= 1e-10


def test_rk4_order():
    ratio = rk4_error(0.1) / rk4_error(0.05)
    assert 12.0 <= ratio <= 20.0


def test_rkf45_exponential_and_constant():
    ts, xs, stats = integrate(decay, [1.0], 1.0, "rkf45")
    assert ts[-1] == 1.0 and np.all(np.diff(ts) > 0)
    assert abs(xs[0, -1] - math.exp(-1.0)) <= 1e-8
    assert stats["steps"] > 0
    _, xs, _ = integrate(lambda t, x: np.zeros(2), [1.5, -2.0], 3.0, "rk4", h=0.1)
    np.testing.assert_array_equal(xs, np.tile([[1.5], [-2.0]], (1, xs.shape[1])))


def test_integrator_argument_errors():
    with pytest.raises(ValueError):
        integrate(decay, [1.0], 0.0)
    with pytest.raises(ValueError):
        integrate(decay, [1.0], 1.0, "rk4")
    with pytest.raises(ValueError):
        integrate(decay, [1.0], 1.0, "euler")


def test_blowup_is_reported():
    with pytest.raises(IntegrationError, match="blowup"):
        integrate(lambda t, x: x * x, [1.0], 2.0, "rkf45")


def test_step_underflow_is_reported():
    def rhs(t, x):
        return np.array([np.nan]) if t > 0.5 else -x

    with pytest.raises(IntegrationError, match="underflow") as info:
        integrate(rhs, [1.0], 1.0, "rkf45")
    assert 0.5 - 1e-9 <= info.value.t <= 0.5


def test_oscillator_energy_conservation(oscillator):
    tr = simulate_closed_loop(oscillator.system, None, [1.0, 0.5], 100.0, observables={"V": oscillator.V})
    assert abs(tr.observables["V"][-1] - tr.observables["V"][0]) <= 1e-7
    assert np.all(tr.observables["|u|"] == 0)


def test_manipulator_reference_run(manipulator):
    tr = simulate_closed_loop(
        manipulator.raw,
        lambda x: np.array(manipulator.raw_feedback(list(x))),
        X0_MANIP,
        200.0,
        observables={"V": manipulator.V, "Vsharp": manipulator.Vsharp},
    )
    assert np.linalg.norm(tr.final_state) <= 1e-2
    assert lyapunov_monotonicity(tr, "Vsharp") <= 1e-8
    assert lyapunov_monotonicity(tr, "V") <= 1e-8
    assert tr.summary()["sup_input_norm"] <= math.sqrt(2.0)


def test_equilibrium_stays_put(manipulator):
    tr = simulate_closed_loop(
        manipulator.raw, lambda x: np.array(manipulator.raw_feedback(list(x))), np.zeros(4), 10.0, observables={"V": manipulator.V}
    )
    assert np.all(tr.states == 0)
    assert lyapunov_monotonicity(tr, "V") == 0.0


def test_oscillator_synthesized_run(oscillator, osc_result):
    res = osc_result
    tr = simulate_closed_loop(
        oscillator.system,
        lambda x: res.feedback(np.asarray(x)[:, None])[:, 0],
        [3.0, -1.0],
        50.0,
        observables={"V": oscillator.V, "Vsharp": res.Vsharp},
    )
    assert np.max(tr.observables["|u|"]) <= 0.1
    assert lyapunov_monotonicity(tr, "V") <= 1e-8
    assert tr.observables["V"][-1] < tr.observables["V"][0]


def test_disturbed_runs_report_increases(manipulator):
    d = Disturbance("constant", {"value": [1.0, 1.0]}, m=2)
    tr = simulate_closed_loop(manipulator.raw, lambda x: np.array(manipulator.raw_feedback(list(x))), np.zeros(4), 5.0, d, observables={"V": manipulator.V})
    assert lyapunov_monotonicity(tr, "V") > 0
    np.testing.assert_allclose(tr.observables["energy"], math.sqrt(2.0) * tr.times, rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(["constant", "decaying-exponential", "sinusoid"]),
    a=st.floats(-3.0, 3.0),
    b=st.floats(-3.0, 3.0),
    rate=st.floats(0.0, 3.0),
    t=st.floats(0.0, 20.0),
)
def test_disturbance_energy_matches_quadrature(kind, a, b, rate, t):
    if kind == "constant":
        d = Disturbance(kind, {"value": [a, b]}, m=2)
    elif kind == "decaying-exponential":
        d = Disturbance(kind, {"amplitude": [a, b], "rate": rate}, m=2)
    else:
        d = Disturbance(kind, {"amplitude": [a, b], "frequency": rate, "phase": 0.3}, m=2)
    ref = quad(lambda s: float(np.linalg.norm(d(s))), 0.0, t, limit=400, epsabs=1e-12, epsrel=1e-12)[0]
    assert abs(float(d.energy(t)) - ref) <= 1e-8 * (1.0 + ref)


def test_piecewise_table_disturbance():
    d = Disturbance("piecewise-table", {"times": [0.0, 1.0, 3.0], "values": [[1.0], [-2.0], [0.0]]}, m=1)
    assert d(0.5)[0] == 1.0 and d(2.0)[0] == -2.0 and d(10.0)[0] == 0.0
    assert float(d.energy(0.5)) == 0.5
    assert float(d.energy(3.0)) == 5.0
    assert float(d.energy(7.0)) == 5.0
    with pytest.raises(ValueError):
        Disturbance("piecewise-table", {"times": [1.0, 2.0], "values": [[1.0], [2.0]]}, m=1)
    with pytest.raises(ValueError):
        Disturbance("impulse")


def test_zero_order_hold(oscillator):
    fb = lambda x: np.array([-0.1 * np.tanh(x[1])])
    tr = simulate_closed_loop(oscillator.system, fb, [1.0, 0.0], 2.0, hold=0.5)
    assert tr.stats["hold"] == 0.5
    for k, t in enumerate(tr.times[1:], start=1):
        seg = min(int(math.ceil(t / 0.5 - 1e-12)) - 1, 3)
        j = int(np.searchsorted(tr.times, 0.5 * seg - 1e-12))
        assert tr.inputs[0, k] == pytest.approx(fb(tr.states[:, j])[0], abs=1e-15)
    cont = simulate_closed_loop(oscillator.system, fb, [1.0, 0.0], 2.0)
    assert not np.allclose(tr.final_state, cont.final_state, atol=1e-9)


def test_iiss_trajectory_bound(manipulator, manip_result, manip_iiss):
    res = manip_iiss
    fb = lambda x: manip_result.feedback(np.asarray(x)[:, None])[:, 0]
    for d in (
        Disturbance("zero", m=2),
        Disturbance("decaying-exponential", {"amplitude": [1.0, 1.0], "rate": 1.0}, m=2),
        Disturbance("constant", {"value": [1.0, 1.0]}, m=2),
    ):
        tr = simulate_closed_loop(manipulator.system, fb, X0_MANIP, 50.0, d, observables={"Utilde": res.Utilde})
        cert = iiss_trajectory_bound(tr, res.Utilde)
        assert cert.verdict == "pass-on-region", (d.kind, cert.worst_margin)
        assert np.all(np.isfinite(tr.states))
        if d.kind == "zero":
            assert lyapunov_monotonicity(tr, "Utilde") <= 1e-8


def test_iiss_trajectory_bound_detects_growth(oscillator):
    tr = simulate_closed_loop(oscillator.system, None, [1.0, 0.0], 1.0)
    grow = lambda X: np.asarray(X[0]) * 0.0 + np.linspace(0.0, 1.0, X.shape[1])
    cert = iiss_trajectory_bound(tr, grow)
    assert cert.verdict == "fail" and len(cert.witness) == 3


def test_csv_header_and_determinism(tmp_path, manipulator):
    def run():
        return simulate_closed_loop(
            manipulator.raw,
            lambda x: np.array(manipulator.raw_feedback(list(x))),
            X0_MANIP,
            5.0,
            observables={"V": manipulator.V, "Vsharp": manipulator.Vsharp},
        )

    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    header = write_csv(run(), a)
    write_csv(run(), b)
    assert header == ["t", "x1", "x2", "x3", "x4", "u1", "u2", "d1", "d2", "V", "Vsharp"]
    assert a.read_text().splitlines()[0] == ",".join(header)
    assert a.read_bytes() == b.read_bytes()
    row = a.read_text().splitlines()[1].split(",")
    assert float(row[1]) == 3.0


def test_batch_matches_sequential(oscillator):
    jobs = [dict(system=oscillator.system, feedback=lambda x: np.array([-0.1 * x[1]]), x0=[float(k), 0.0], T=3.0) for k in range(1, 5)]
    seq = simulate_batch(jobs, workers=1)
    par = simulate_batch(jobs, workers=4)
    for s, p in zip(seq, par):
        np.testing.assert_array_equal(s.states, p.states)
