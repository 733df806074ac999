import numpy as np
import pytest

from jqclf import fields as F
from jqclf.iiss import DFunction, build_iiss
from jqclf.synthesis import Settings, synthesize
from jqclf.systems import FullyNonlinearSystem, builtin


def quadratic_input_problem():
    sysF = FullyNonlinearSystem(lambda x, u: [x[1], -x[0] - x[1] + u[0] + u[0] * u[0]], 2, 1, name="quad")
    V = F.ScalarField(lambda x: 0.5 * (x[0] * x[0] + x[1] * x[1]), 2, name="V")
    G = F.VectorField(lambda x: [0.0, x[0]], 2, name="G")
    return sysF, V, G


@pytest.fixture(scope="session")
def oscillator():
    return builtin("harmonic-oscillator")


@pytest.fixture(scope="session")
def manipulator():
    return builtin("two-link-manipulator")


@pytest.fixture(scope="session")
def osc_result(oscillator):
    return synthesize(oscillator.system, oscillator.V, oscillator.G, Settings(epsilon=0.1, region_radius=10.0, seed=0))


@pytest.fixture(scope="session")
def manip_result(manipulator):
    return synthesize(manipulator.system, manipulator.V, manipulator.G, Settings(epsilon=1.0, region_radius=10.0, seed=0))


@pytest.fixture(scope="session")
def nonlinear_result():
    sysF, V, G = quadratic_input_problem()
    return synthesize(sysF, V, G, Settings(epsilon=0.5, region_radius=10.0, seed=0))


@pytest.fixture(scope="session")
def manip_iiss(manip_result):
    return build_iiss(manip_result, DFunction.from_expression("2*(s+2)"))


def nonzero(X):
    return X[:, np.linalg.norm(X, axis=0) > 0]
