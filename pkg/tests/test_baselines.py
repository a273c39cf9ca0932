import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from maxrm.baselines import fit_magging, fit_rf, oracle_analytic_risks
from maxrm.cart import TreeHyperparams
from maxrm.dataplane import DataError, EnvDataset, default_config, generate
from maxrm.risk import RiskSpec

HP = TreeHyperparams(min_leaf_size=10)


def _pwl_quad(a, b, alpha, beta, sd=0.5):
    # numeric E over U[-4, 4] of (f_e(x) - f(x))^2 plus noise
    f = lambda x: ((alpha - a) * x * (x <= 0) + (beta - b) * x * (x > 0)) ** 2 / 8.0
    return quad(f, -4, 0)[0] + quad(f, 0, 4)[0] + sd**2


def test_pwl_oracle_values():
    _, z = oracle_analytic_risks((5 / 4, 9 / 4))
    assert z == pytest.approx(16.58, abs=0.01)
    _, z = oracle_analytic_risks((5 / 3, 11 / 6))
    assert z == pytest.approx(25.29, abs=0.01)


def test_pwl_matches_quadrature():
    pairs = [(-0.5, 4.0), (3.0, 0.5), (2.5, 1.0)]
    for a, b in [(5 / 4, 9 / 4), (0.0, 0.0), (1.0, -2.0)]:
        r, _ = oracle_analytic_risks((a, b))
        ref = [_pwl_quad(a, b, al, be) for al, be in pairs]
        assert np.allclose(r, ref, atol=1e-8)


def test_mixture_oracle_values():
    _, z = oracle_analytic_risks((2.4, -2.4), "mixture")
    assert z == pytest.approx(18.28, abs=0.01)
    _, z = oracle_analytic_risks((0.0, 0.0), "mixture")
    assert z == pytest.approx(49.0, abs=0.01)


def test_unknown_setting():
    with pytest.raises(ValueError):
        oracle_analytic_risks((0, 0), "gp-noshift")


@pytest.mark.parametrize("setting,slopes", [("pwl", (5 / 4, 9 / 4)), ("mixture", (2.4, -2.4))])
def test_oracle_is_local_minimax(setting, slopes):
    _, z0 = oracle_analytic_risks(slopes, setting)
    for da in (-0.01, 0.0, 0.01):
        for db in (-0.01, 0.0, 0.01):
            _, z = oracle_analytic_risks((slopes[0] + da, slopes[1] + db), setting)
            assert z >= z0 - 1e-12


@pytest.fixture(scope="module")
def pwl():
    return generate(default_config("pwl", n_total=450, seed=11))[:2]


def test_magging_single_env(pwl):
    train, test = pwl
    one = EnvDataset(train.X, train.y, np.zeros(train.n, dtype=int), 1)
    m = fit_magging(one, RiskSpec.mse(1), HP, B=4, seed=3)
    assert np.array_equal(m.q, [1.0])
    assert np.allclose(m.predict(test.X), m.forests[0].predict(test.X))


def test_magging_convex_combination(pwl):
    train, test = pwl
    m = fit_magging(train, RiskSpec.mse(3), HP, B=4, seed=3)
    assert m.q.min() >= 0 and m.q.sum() == pytest.approx(1)
    P = m.env_predictions(test.X)
    pred = m.predict(test.X)
    assert np.all(pred >= P.min(axis=1) - 1e-9) and np.all(pred <= P.max(axis=1) + 1e-9)


def test_magging_identical_envs():
    train, _, _ = generate(default_config("pwl", n_per_env=150, seed=2))
    e0 = train.env_rows(0)
    X, y = train.X[e0], train.y[e0]
    dup = EnvDataset(np.vstack([X, X]), np.concatenate([y, y]), np.repeat([0, 1], len(y)), 2)
    m = fit_magging(dup, RiskSpec.mse(2), HP, B=4, seed=0)
    assert m.q.min() >= 0 and m.q.sum() == pytest.approx(1)
    # both forests see the same rows but draw different bootstraps, so check against the mix
    pred = m.predict(X)
    r = np.mean((y - pred) ** 2)
    assert m.z == pytest.approx(r, abs=1e-6)


def test_magging_mixture_slope_goes_to_zero():
    # env forests fit slopes 3, -3, 2; the best magging combination is the zero slope
    train, test, _ = generate(default_config("mixture", n_per_env=3000, seed=3))
    m = fit_magging(train, RiskSpec.mse(3), TreeHyperparams(min_leaf_size=30), B=10, seed=3)
    assert abs(m.q @ np.array([3.0, -3.0, 2.0])) < 0.2
    pred = m.predict(test.X)
    worst = max(np.mean((test.y[test.env == e] - pred[test.env == e]) ** 2) for e in range(3))
    assert worst == pytest.approx(49.0, rel=0.06)


def test_magging_small_env_rejected():
    ds = EnvDataset(np.arange(25.0)[:, None], np.arange(25.0), np.array([0] * 22 + [1] * 3), 2)
    with pytest.raises(DataError, match="environment 1"):
        fit_magging(ds, RiskSpec.mse(2), HP, B=2)


def test_rf_is_deterministic(pwl):
    train, test = pwl
    a = fit_rf(train, HP, B=3, seed=9).predict(test.X)
    b = fit_rf(train, HP, B=3, seed=9).predict(test.X)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_pwl_risk_at_least_noise(a, b):
    r, z = oracle_analytic_risks((a, b))
    assert np.all(r >= 0.25 - 1e-12) and z == r.max()
