import numpy as np
import pytest

from jqclf import fields as F
from jqclf.sampling import Sampler
from jqclf.systems import (
    ControlAffineSystem,
    FullyNonlinearSystem,
    MechanicalData,
    SystemError_,
    builtin,
    extract_affine_data,
    hamiltonian_system,
    remainder_h,
    smooth_G,
)


def quadratic_input_system():
    return FullyNonlinearSystem(lambda x, u: [x[1], -x[0] - x[1] + u[0] + u[0] * u[0]], 2, 1, name="quad")


def coupled_mechanics():
    def Minv(q):
        return [[2.0 + F.sin(q[0]), 0.5], [0.5, 1.0 + 1.0 / (1.0 + q[1] * q[1])]]

    P = F.ScalarField(lambda q: F.sqrt(1.0 + q[0] * q[0]) - 1.0 + 0.5 * q[1] * q[1], 2, name="P")
    return MechanicalData(Minv, P)


def test_extract_affine_data():
    sys = FullyNonlinearSystem(lambda x, u: [x[1], u[0] + u[0] * u[0]], 2, 1)
    f, g = extract_affine_data(sys)
    X = Sampler(seed=0, radius=10, count=100).ball(2)
    np.testing.assert_array_equal(f(X), np.stack([X[1], np.zeros(100)]))
    np.testing.assert_array_equal(g[0](X), np.tile([[0.0], [1.0]], (1, 100)))


def test_extract_from_affine_reproduces_columns():
    man = builtin("two-link-manipulator")
    f, g = extract_affine_data(man.closed_forms["changed_system"])
    X = Sampler(seed=1, radius=10, count=100).ball(4)
    np.testing.assert_allclose(f(X), man.system.f(X), rtol=1e-14, atol=1e-14)
    for gk, ref in zip(g, man.system.g):
        np.testing.assert_allclose(gk(X), ref(X), rtol=1e-14, atol=1e-14)


def test_remainder_examples():
    sys = FullyNonlinearSystem(lambda x, u: [x[1], u[0] + u[0] * u[0]], 2, 1)
    h = remainder_h(sys, np.array([0.3, -0.2]), np.array([0.7]))
    np.testing.assert_allclose(h, [[0.0], [0.7]], atol=1e-12)
    osc = builtin("harmonic-oscillator")
    X = Sampler(seed=2, radius=10, count=50).ball(2)
    U = Sampler(seed=3, radius=3, count=50).ball(1)
    assert np.max(np.abs(remainder_h(osc.system.as_nonlinear(), X, U))) <= 1e-12


def test_reconstruction_identity():
    sys = quadratic_input_system()
    f, g = extract_affine_data(sys)
    X = Sampler(seed=4, radius=10, count=1000).ball(2)
    U = Sampler(seed=5, radius=3, count=1000).ball(1)
    h = remainder_h(sys, X, U)
    recon = f(X) + g[0](X) * U[0] + h[:, 0, :] * U[0]
    np.testing.assert_allclose(sys(X, U), recon, atol=1e-8)


def test_origin_checks():
    with pytest.raises(SystemError_):
        FullyNonlinearSystem(lambda x, u: [x[1] + 1.0, u[0]], 2, 1)
    with pytest.raises(SystemError_):
        ControlAffineSystem(F.VectorField(lambda x: [x[1], 1.0], 2), [F.VectorField(lambda x: [0.0, 1.0], 2)])
    with pytest.raises(SystemError_):
        ControlAffineSystem(F.VectorField(lambda x: [x[1], x[0]], 2), [F.VectorField(lambda x: [0.0, 1.0, 0.0], 3)])


def test_oscillator_hamiltonian():
    md = MechanicalData(MechanicalData.constant_inertia([[1.0]]), F.ScalarField(lambda q: 0.5 * q[0] * q[0], 1))
    sys, V, G = hamiltonian_system(md)
    X = Sampler(seed=6, radius=10, count=100).ball(2)
    np.testing.assert_allclose(sys.f(X), np.stack([X[1], -X[0]]), atol=1e-15)
    np.testing.assert_allclose(V(X), 0.5 * (X[0] ** 2 + X[1] ** 2), rtol=1e-15)
    np.testing.assert_allclose(G(X), np.stack([np.zeros(100), X[0]]), atol=1e-15)


def test_hamiltonian_energy_and_input_row():
    md = coupled_mechanics()
    sys, V, G = hamiltonian_system(md, validate=Sampler(seed=7, radius=10, count=512))
    X = Sampler(seed=8, radius=10, count=100).ball(4)
    LfV = F.lie_derivative(V, sys.f)(X)
    assert np.max(np.abs(LfV)) <= 1e-12 * (1.0 + np.max(np.abs(V(X))))
    q, p = X[:2], X[2:]
    Mi = np.array([[2.0 + np.sin(q[0]), 0.5 * np.ones(100)], [0.5 * np.ones(100), 1.0 + 1.0 / (1.0 + q[1] ** 2)]])
    row = np.einsum("ib,ijb->jb", p, Mi)
    for k, gk in enumerate(sys.g):
        np.testing.assert_allclose(F.lie_derivative(V, gk)(X), row[k], rtol=1e-12, atol=1e-12)


def test_mechanical_validation_errors():
    bad_inertia = MechanicalData(lambda q: [[-1.0]], F.ScalarField(lambda q: 0.5 * q[0] * q[0], 1))
    with pytest.raises(SystemError_):
        bad_inertia.validate(Sampler(seed=0, radius=5, count=64))
    bad_potential = MechanicalData(lambda q: [[1.0]], F.ScalarField(lambda q: 0.5 * q[0] * q[0] - 1.0, 1))
    with pytest.raises(SystemError_):
        bad_potential.validate(Sampler(seed=0, radius=5, count=64))
    report = MechanicalData(lambda q: [[1.0]], F.ScalarField(lambda q: 0.5 * q[0] * q[0], 1)).validate(
        Sampler(seed=0, radius=5, count=64)
    )
    assert report["radially_growing"] and report["region_radius"] == 5


def test_smooth_G():
    osc = builtin("harmonic-oscillator")
    assert smooth_G(osc.G, osc.V, 0) is osc.G
    G1 = smooth_G(osc.G, osc.V, 1)
    np.testing.assert_allclose(G1([1.0, 0.0]), [0.0, 0.5])
    with pytest.raises(ValueError):
        smooth_G(osc.G, osc.V, -1)
    man = builtin("two-link-manipulator")
    X = Sampler(seed=9, radius=3, count=100).ball(4)
    for N in (1, 2):
        GN = smooth_G(man.G, man.V, N)
        lhs = F.lie_derivative(F.lie_derivative(man.V, GN), man.system.f)(X)
        V = man.V(X)
        LfV = F.lie_derivative(man.V, man.system.f)(X)
        LGV = F.lie_derivative(man.V, man.G)(X)
        LfLGV = F.lie_derivative(F.lie_derivative(man.V, man.G), man.system.f)(X)
        rhs = N * V ** (N - 1) * LfV * LGV + V**N * LfLGV
        assert np.max(np.abs(lhs - rhs) / (1.0 + np.abs(rhs))) <= 1e-8


def test_manipulator_examples():
    man = builtin("two-link-manipulator")
    assert man.V(np.zeros(4)) == 0.0
    assert man.Vsharp(np.zeros(4)) == 0.0
    assert man.V([0.0, 1.0, 0.0, 1.0]) == pytest.approx(1.0, abs=1e-15)
    LfLGV = man.closed_forms["LfLGV"]
    assert LfLGV([1.0, 0.0, 0.0, 0.0]) == pytest.approx(-1.0 / (2.0 * np.sqrt(2.0)), abs=1e-12)
    X = Sampler(seed=10, radius=10, count=100).ball(4)
    LgV = np.stack([F.lie_derivative(man.V, gk)(X) for gk in man.system.g])
    np.testing.assert_allclose(LgV, np.stack([X[1], X[3]]), rtol=1e-12, atol=1e-12)


def test_manipulator_closed_forms_match_autodiff():
    man = builtin("two-link-manipulator")
    X = Sampler(seed=11, radius=10, count=1000).ball(4)
    LGV = F.lie_derivative(man.V, man.G)
    LfLGV = F.lie_derivative(LGV, man.system.f)
    cf = man.closed_forms
    assert np.max(np.abs(LGV(X) - cf["LGV"](X)) / (1.0 + np.abs(cf["LGV"](X)))) <= 1e-8
    assert np.max(np.abs(LfLGV(X) - cf["LfLGV"](X)) / (1.0 + np.abs(cf["LfLGV"](X)))) <= 1e-8


def test_manipulator_raw_and_affine_agree():
    man = builtin("two-link-manipulator")
    X = Sampler(seed=12, radius=10, count=200).ball(4)
    U = Sampler(seed=13, radius=2, count=200).ball(2)
    changed = man.closed_forms["changed_system"](X, U)
    np.testing.assert_allclose(changed, man.system.rhs(X, U), rtol=1e-13, atol=1e-12)
    cl_raw = man.raw.F_fn(list(X), man.raw_feedback(list(X)))
    cl_aff = man.system.generic_rhs(list(X), man.reference_feedback(list(X)))
    np.testing.assert_allclose(np.stack(cl_raw), np.stack(cl_aff), rtol=1e-13, atol=1e-12)


def test_feedback_bound():
    man = builtin("two-link-manipulator")
    X = Sampler(seed=14, radius=10, count=100_000).ball(4)
    tau, force = man.raw_feedback(list(X))
    assert max(np.max(np.abs(tau)), np.max(np.abs(force))) <= 1.0


def test_oscillator_examples():
    osc = builtin("harmonic-oscillator")
    assert osc.V(np.zeros(2)) == 0.0
    X = Sampler(seed=15, radius=10, count=100).ball(2)
    LGV = F.lie_derivative(osc.V, osc.G)
    np.testing.assert_allclose(F.lie_derivative(LGV, osc.system.f)(X), X[1] ** 2 - X[0] ** 2, atol=1e-12)
    bracket = F.iterated_ad(osc.system.f, osc.system.g[0], 1)
    np.testing.assert_allclose(F.lie_derivative(osc.V, bracket)(X), -X[0], atol=1e-15)


def test_unknown_builtin():
    with pytest.raises(SystemError_):
        builtin("pendulum")


def test_c2_check():
    assert quadratic_input_system().check_c2_in_u(Sampler(seed=0, radius=5)) == pytest.approx(2.0)
