import json

import numpy as np
import pytest

from jqclf import fields as F
from jqclf.envelopes import MonotoneEnvelope
from jqclf.fields import ScalarField, VectorField
from jqclf.sampling import Sampler
from jqclf.verify import (
    check_H1,
    check_H2,
    check_negative_definite,
    check_nonpositive,
    check_weak_jq,
    gradient_crosscheck,
)

from test_systems import coupled_mechanics


def sampler(count=10_000, seed=0, radius=10.0):
    return Sampler(seed=seed, radius=radius, count=count)


def half_norm(n):
    return ScalarField(lambda x: 0.5 * sum(xi * xi for xi in x), n, name="V")


@pytest.mark.parametrize("name", ["manip", "osc"])
def test_assumptions_hold_for_builtins(name, manipulator, oscillator):
    b = manipulator if name == "manip" else oscillator
    s = sampler()
    h1 = check_H1(b.V, b.system.f, s)
    assert h1.verdict == "pass-on-region"
    assert h1.details["V(0)"] == 0.0
    h2 = check_H2(b.V, b.system.f, b.system.g, b.G, s)
    assert h2.verdict == "pass-on-region", h2.to_json()
    assert h2.details["tube_points"] >= 16
    jq = check_weak_jq(b.V, b.system.f, b.system.g, 1, s)
    assert jq.verdict == "pass-on-region"


def test_H2_tube_value_on_oscillator(oscillator):
    # on the tube p ~ 0 the key quantity is p^2 - q^2 ~ -q^2
    LGV = F.lie_derivative(oscillator.V, oscillator.G)
    LfLGV = F.lie_derivative(LGV, oscillator.system.f)
    q = np.linspace(0.1, 5.0, 20)
    X = np.stack([q, np.zeros_like(q)])
    np.testing.assert_allclose(LfLGV(X), -(q**2), rtol=1e-14)


def test_H1_fails_with_witness():
    V = half_norm(2)
    f = VectorField(lambda x: [x[1], x[0]], 2)
    cert = check_H1(V, f, sampler())
    assert cert.verdict == "fail"
    w = np.array(cert.witness)
    # L_f V = 2 x1 x2 > 0 at the witness
    assert 2.0 * w[0] * w[1] > 0
    assert F.lie_derivative(V, f)(w) == pytest.approx(-cert.worst_margin + 1e-12 * max(1.0, 2.0 * abs(w[0] * w[1])), rel=1e-9)
    assert float(F.lie_derivative(V, f)([1.0, 1.0])) == 2.0


def test_H1_rejects_nonzero_origin_and_nonpositive_V():
    f = VectorField(lambda x: [x[1], -x[0]], 2)
    shifted = ScalarField(lambda x: 0.5 * (x[0] * x[0] + x[1] * x[1]) + 1.0, 2)
    cert = check_H1(shifted, f, sampler(1000))
    assert cert.verdict == "fail" and cert.witness == [0.0, 0.0]
    semi = ScalarField(lambda x: x[0] * x[0], 2)
    cert = check_H1(semi, VectorField(lambda x: [0.0 * x[0], 0.0 * x[1]], 2), sampler(1000))
    assert cert.verdict == "fail"


def test_H2_fails_for_zero_G(oscillator):
    G0 = VectorField(lambda x: [0.0 * x[0], 0.0 * x[1]], 2)
    cert = check_H2(oscillator.V, oscillator.system.f, oscillator.system.g, G0, sampler())
    assert cert.verdict == "fail"
    w = np.array(cert.witness)
    LGV = F.lie_derivative(oscillator.V, G0)
    val = min(float(F.lie_derivative(LGV, oscillator.system.f)(w)), float(F.lie_derivative(oscillator.V, oscillator.system.f)(w)))
    assert val >= 0.0
    assert abs(float(F.lie_derivative(oscillator.V, oscillator.system.g[0])(w))) <= cert.details["tube_tol"]


def test_weak_jq_fails_for_zero_system():
    zero = VectorField(lambda x: [0.0 * x[0], 0.0 * x[1]], 2)
    cert = check_weak_jq(half_norm(2), zero, [zero], 1, sampler())
    assert cert.verdict == "fail"
    assert np.linalg.norm(cert.witness) > cert.details["zero_tol"]


def test_weak_jq_depth_budget(oscillator):
    with pytest.raises(ValueError):
        check_weak_jq(oscillator.V, oscillator.system.f, oscillator.system.g, 3, sampler(100))


def test_negative_definite_examples():
    neg = ScalarField(lambda x: -(x[0] * x[0] + x[1] * x[1]), 2)
    assert check_negative_definite(neg, sampler()).verdict == "pass-on-region"
    semi = ScalarField(lambda x: -x[0] * x[0], 2)
    cert = check_negative_definite(semi, sampler())
    assert cert.verdict == "fail"
    w = np.array(cert.witness)
    assert np.linalg.norm(w) > 0
    assert abs(w[0]) <= 1e-6
    assert float(semi(w)) >= -1e-12


def test_negative_definite_with_margin():
    neg = ScalarField(lambda x: -(x[0] * x[0] + x[1] * x[1]), 2)
    s = np.linspace(0.0, 20.0, 41)
    env = MonotoneEnvelope(s, 0.5 * s**2, "nondecreasing", origin_power=2.0)
    assert check_negative_definite(neg, sampler(), env).passed
    too_big = MonotoneEnvelope(s, 2.0 * s**2, "nondecreasing", origin_power=2.0)
    cert = check_negative_definite(neg, sampler(), too_big)
    assert cert.verdict == "fail"
    w = np.array(cert.witness)
    assert float(neg(w)) > -float(too_big(np.linalg.norm(w))) + 1e-9


def test_manipulator_vsharp_decreases(manipulator):
    closed = manipulator.system.closed_loop(manipulator.reference_feedback)
    dV = F.lie_derivative(manipulator.Vsharp, closed)
    cert = check_negative_definite(dV, sampler(100_000), manipulator.closed_forms["decay_bound"], name="Vsharp-dot")
    assert cert.verdict == "pass-on-region"
    assert cert.samples == 100_000


def test_T_functions_nonpositive(manipulator):
    cf = manipulator.closed_forms
    cert = check_nonpositive({"T1": cf["T1"], "T2": cf["T2"]}, sampler(100_000), 4)
    assert cert.verdict == "pass-on-region"
    assert cert.details["T1"] <= 0 and cert.details["T2"] <= 0


def test_gradient_crosscheck():
    poly = ScalarField(lambda x: x[0] ** 3 * x[1] - 2.0 * x[0] * x[1] * x[1] + x[1] ** 4, 2, name="poly")
    const = ScalarField(lambda x: 3.0 + 0.0 * x[0], 2, name="const")
    out = gradient_crosscheck([poly, const], sampler(1000, radius=2.0))
    assert out["fields"]["poly"]["worst"] <= 1e-9
    assert out["fields"]["const"]["worst"] == 0.0
    np.testing.assert_array_equal(F.gradient(const, sampler(100).ball(2)), 0.0)


def test_gradient_crosscheck_manipulator_vsharp(manipulator):
    out = gradient_crosscheck([manipulator.Vsharp], sampler(1000))
    assert out["worst"] <= 1e-6


def test_certificates_are_deterministic(oscillator):
    a = check_H2(oscillator.V, oscillator.system.f, oscillator.system.g, oscillator.G, sampler(seed=5))
    b = check_H2(oscillator.V, oscillator.system.f, oscillator.system.g, oscillator.G, Sampler(seed=5, radius=10.0, count=10_000, workers=3))
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    c = check_weak_jq(oscillator.V, oscillator.system.f, oscillator.system.g, 1, sampler(seed=5))
    d = check_weak_jq(oscillator.V, oscillator.system.f, oscillator.system.g, 1, sampler(seed=5))
    assert json.dumps(c.to_json()) == json.dumps(d.to_json())


def test_fail_verdicts_carry_counts():
    semi = ScalarField(lambda x: -x[0] * x[0], 2)
    small = check_negative_definite(semi, sampler(1000))
    large = check_negative_definite(semi, sampler(2000))
    assert small.samples < large.samples
    assert small.verdict == large.verdict == "fail"


def test_hamiltonian_system_passes_H1():
    from jqclf.systems import hamiltonian_system

    sys, V, G = hamiltonian_system(coupled_mechanics())
    assert check_H1(V, sys.f, sampler(5000)).passed
