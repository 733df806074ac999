import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from jqclf import envelopes as E
from jqclf import fields as F
from jqclf.sampling import Sampler, rng_for


def kinf():
    s = np.linspace(0.0, 4.0, 9)
    return E.MonotoneEnvelope(s, s**2 + s, "nondecreasing", "linear", class_kinf=True, name="k")


def test_validation():
    with pytest.raises(ValueError):
        E.MonotoneEnvelope([0.0, 1.0], [1.0, 0.0], "nondecreasing")
    with pytest.raises(ValueError):
        E.MonotoneEnvelope([1.0, 2.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        E.MonotoneEnvelope([0.0, 1.0], [0.0, 0.0], "nondecreasing", class_kinf=True)
    with pytest.raises(ValueError):
        E.MonotoneEnvelope([0.0, 1.0], [0.0, np.nan])
    with pytest.raises(ValueError):
        kinf()(-1.0)


def test_interpolates_table_and_continues():
    env = kinf()
    np.testing.assert_allclose(env(env.breakpoints), env.values, rtol=1e-14)
    assert env(5.0) == pytest.approx(env.values[-1] + env.tail_slope * 1.0)
    const = E.MonotoneEnvelope([0.0, 1.0, 2.0], [3.0, 2.0, 1.0], "nonincreasing", "constant")
    assert const(10.0) == 1.0 and const.derivative(10.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 10.0)), min_size=3, max_size=12))
def test_monotone_tables_stay_monotone(increments):
    y = np.concatenate([[0.0], np.cumsum(increments)])
    s = np.arange(len(y), dtype=float)
    env = E.MonotoneEnvelope(s, y, "nondecreasing")
    grid = np.linspace(0.0, s[-1] + 2.0, 500)
    v = env(grid)
    assert np.all(np.diff(v) >= -1e-12 * (1.0 + np.abs(v[1:])))
    # never overshoots the neighbouring table values
    k = np.clip(np.searchsorted(s, grid, side="right") - 1, 0, len(s) - 2)
    inside = grid <= s[-1]
    assert np.all(v[inside] <= y[k + 1][inside] + 1e-12)
    assert np.all(v[inside] >= y[k][inside] - 1e-12)


def test_origin_power():
    s = np.array([0.0, 0.5, 1.0, 2.0])
    env = E.MonotoneEnvelope(s, [0.0, 0.25, 1.0, 4.0], "nondecreasing", origin_power=2.0)
    assert env(0.25) == pytest.approx(0.0625)
    assert env.derivative(0.25) == pytest.approx(0.5)


def test_inverse_round_trip():
    env = kinf()
    s = np.linspace(0.0, 8.0, 101)
    np.testing.assert_allclose(env.inverse(env(s)), s, atol=1e-12)
    with pytest.raises(ValueError):
        E.MonotoneEnvelope([0.0, 1.0], [1.0, 1.0]).inverse(0.5)


def test_dual_propagation():
    env = kinf()
    d = env.evaluate(F.Dual(1.5, [1.0], 1))
    assert d.value == pytest.approx(env(1.5)) and d.tangents[0] == pytest.approx(env.derivative(1.5))
    r = env.inverse(F.Dual(2.0, [1.0], 1))
    assert r.tangents[0] == pytest.approx(1.0 / env.derivative(r.value))


def test_integral_matches_quad():
    env = E.MonotoneEnvelope([0.0, 0.5, 1.0, 3.0], [0.0, 0.1, 0.7, 1.0], "nondecreasing", origin_power=1.5)
    I = env.integral()
    for t in (0.2, 0.5, 0.9, 2.0, 5.0):
        ref = quad(lambda s: float(env(s)), 0.0, t, points=[0.5, 1.0, 3.0], epsabs=1e-13, epsrel=1e-13, limit=200)[0]
        assert abs(I(t) - ref) <= 1e-10


def test_json_round_trip():
    env = kinf()
    again = E.MonotoneEnvelope.from_json(env.to_json())
    s = np.linspace(0.0, 6.0, 50)
    np.testing.assert_array_equal(env(s), again(s))


def test_hulls():
    y = np.array([3.0, 1.0, 2.0, 0.5, 4.0])
    np.testing.assert_array_equal(E.nondecreasing_majorant(y), [3, 3, 3, 3, 4])
    np.testing.assert_array_equal(E.nondecreasing_minorant(y), [0.5, 0.5, 0.5, 0.5, 4])
    np.testing.assert_array_equal(E.nonincreasing_minorant(y), [3, 1, 1, 0.5, 0.5])
    np.testing.assert_array_equal(E.nonincreasing_majorant(y), [4, 4, 4, 4, 4])
    z = E.strictly_increasing([0.0, 1.0, 1.0, 2.0])
    assert np.all(np.diff(z) > 0) and z[-1] == 2.0


def test_estimate_power():
    s = np.array([0.0, 0.01, 0.02, 0.04])
    assert E.estimate_power(s, s**2, lower=True) == 3.0
    assert E.estimate_power(s, s**2, lower=False) == 2.0


def test_band_extrema():
    bands = [np.array([1.0, 2.0]), np.array([0.5, 3.0]), np.array([4.0])]
    np.testing.assert_array_equal(E.band_extrema(bands, "min"), [1.0, 0.5, 0.5, 4.0])
    np.testing.assert_array_equal(E.band_extrema(bands, "max"), [2.0, 3.0, 4.0, 4.0])
    out = E.band_extrema(bands, "min", skip_first=True)
    assert np.isnan(out[0]) and out[1] == 0.5


def test_cumulative_integral():
    ci = E.CumulativeIntegral(lambda s: 1.0 / (1.0 + s), [0.0, 1.0, 100.0], tail=lambda a, t: np.log((1.0 + t) / (1.0 + a)))
    for t in (0.3, 1.0, 57.0, 100.0, 1e4):
        assert abs(ci(t) - np.log1p(t)) <= 1e-12 * max(1.0, np.log1p(t))
    d = ci(F.Dual(3.0, [1.0], 1))
    assert d.tangents[0] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        E.CumulativeIntegral(lambda s: s, [0.0, 1.0])(2.0)


def test_sampler_determinism_and_blocks():
    a = Sampler(seed=3, radius=2.0, count=10_000).ball(3, "s")
    b = Sampler(seed=3, radius=2.0, count=10_000, workers=4).ball(3, "s")
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 10_000) and np.max(np.linalg.norm(a, axis=0)) <= 2.0
    c = Sampler(seed=4, radius=2.0, count=10_000).ball(3, "s")
    assert not np.array_equal(a, c)
    d = Sampler(seed=3, radius=2.0, count=10_000, block_size=4096).ball(3, "other")
    assert not np.array_equal(a, d)


def test_sampler_helpers():
    s = Sampler(seed=0, radius=5.0, exclude_origin=1.0, count=2000)
    r = np.linalg.norm(s.ball(2), axis=0)
    assert r.min() >= 1.0 and r.max() <= 5.0
    band = s.sphere_band(3, 0.5, 2.0, 1000, "band")
    rb = np.linalg.norm(band, axis=0)
    assert rb.min() >= 0.5 and rb.max() <= 2.0
    out = Sampler(workers=3, block_size=10).map_blocks(lambda X: X[0] * 2.0, np.arange(95.0)[None, :])
    np.testing.assert_array_equal(out, np.arange(95.0) * 2.0)
    with pytest.raises(ValueError):
        Sampler(strategy="grid")
    assert np.array_equal(rng_for(1, "x").uniform(size=3), rng_for(1, "x").uniform(size=3))
