import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar
from scipy.stats import t as student_t

from maxrm.baselines import fit_rf
from maxrm.cart import TreeHyperparams, fit_cart_tree
from maxrm.dataplane import EnvDataset, default_config, generate, rng_for
from maxrm.evalharness import (ConfigError, ExperimentConfig, MethodSpec, ResultTable,
                               ci_half_width, consistency_probe, convexhull_risk_check, evaluate,
                               mise, permutation_test, run_experiment)
from maxrm.risk import RiskSpec


class _Fn:
    """Model wrapper around a plain function."""

    def __init__(self, f):
        self.f = f

    def predict(self, X):
        return self.f(np.asarray(X))


def _f(X):
    return np.where(X[:, 0] <= 0, 1.25 * X[:, 0], 2.25 * X[:, 0])


def _noiseless(n=60, K=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-4, 4, size=(n, 1))
    return EnvDataset(X, _f(X), np.arange(n) % K, K)


def test_perfect_model_zero_risk():
    ds = _noiseless()
    m = evaluate(_Fn(_f), ds, ("mse", "nrw"))
    assert np.all(m.env_risks["mse"] == 0) and m.max_risk["mse"] == 0 and m.pooled_mse == 0


def test_single_env_max_is_pooled():
    ds = _noiseless(K=1)
    m = evaluate(_Fn(lambda X: np.zeros(len(X))), ds)
    assert m.max_risk["mse"] == pytest.approx(m.pooled_mse, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pooled_is_weighted_env_mean(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 40))
    env = np.concatenate([np.arange(3), rng.integers(0, 3, n - 3)])
    ds = EnvDataset(rng.normal(size=(n, 1)), rng.normal(size=n) * 3, env, 3)
    m = evaluate(_Fn(lambda X: X[:, 0]), ds)
    w = ds.n_e / ds.n
    assert m.pooled_mse == pytest.approx(float(w @ m.env_risks["mse"]), rel=1e-10)


def test_evaluate_is_pure():
    train, test, _ = generate(default_config("pwl", n_total=300, seed=1))
    model = fit_rf(train, TreeHyperparams(min_leaf_size=10), B=3, seed=0)
    assert evaluate(model, test, ("mse", "nrw")).as_dict() == evaluate(model, test, ("mse", "nrw")).as_dict()


def test_empty_env_excluded_with_warning():
    ds = _noiseless(n=20, K=2)
    ds = EnvDataset(ds.X, ds.y, np.zeros(ds.n, dtype=int), 3)
    m = evaluate(_Fn(lambda X: np.zeros(len(X))), ds, ("mse", "nrw"))
    assert m.warnings and np.isfinite(m.max_risk["mse"])
    assert m.max_risk["mse"] == pytest.approx(m.env_risks["mse"][0])


def test_zero_predictor_mixture_worst_case():
    _, test, _ = generate(default_config("mixture", n_per_env=40000, seed=5))
    m = evaluate(_Fn(lambda X: np.zeros(len(X))), test)
    assert m.max_risk["mse"] == pytest.approx(49.0, rel=0.03)


def test_mise_exact():
    X = np.random.default_rng(0).uniform(-4, 4, size=(500, 1))
    assert mise(_Fn(_f), _f, X) == 0
    assert mise(_Fn(lambda X: _f(X) + 0.7), _f, X) == pytest.approx(0.49, abs=1e-12)
    with pytest.raises(ValueError):
        mise(_Fn(_f), _f, np.zeros((0, 1)))


def test_ci_half_width():
    assert ci_half_width([3.0]) is None
    v = np.array([1.0, 2.0, 4.0, 7.0])
    ref = student_t.ppf(0.975, 3) * np.std(v, ddof=1) / 2.0
    assert ci_half_width(v) == pytest.approx(ref, rel=1e-12)


def test_result_table_csv_roundtrip(tmp_path):
    t = ResultTable()
    rng = np.random.default_rng(0)
    for r in range(5):
        t.add("a", r, "max_mse", rng.normal())
        t.add("b", r, "max_mse", rng.normal())
    t.add("c", 0, "max_mse", 1.5)
    per, agg = tmp_path / "per.csv", tmp_path / "agg.csv"
    t.write_csv(per, agg)
    back = ResultTable.read_csv(per)
    assert back.aggregate() == t.aggregate()
    lines = agg.read_text().splitlines()
    assert lines[0] == "method,metric,mean,ci_half"
    assert lines[-1] == "c,max_mse,1.5,"
    assert per.read_text().splitlines()[0] == "method,rep,metric,value"


def test_permutation_test():
    a = np.random.default_rng(0).normal(size=20)
    assert permutation_test(a, a, n_perm=500) == 1.0
    p = permutation_test(np.ones(20), np.zeros(20), n_perm=10_000)
    assert p <= 0.001
    with pytest.raises(ValueError):
        permutation_test(a, a, n_perm=0)
    with pytest.raises(ValueError):
        permutation_test(a, a[:5])
    with pytest.raises(ValueError):
        permutation_test(a[:1], a[:1])


def test_permutation_test_uniform_under_null():
    # exact sign symmetry: p-values should not pile up near zero
    rng = np.random.default_rng(3)
    ps = [permutation_test(rng.normal(size=15), rng.normal(size=15), n_perm=200, seed=i)
          for i in range(60)]
    assert np.mean(np.array(ps) < 0.05) < 0.2


def test_hull_vertex_and_midpoint():
    ds = _noiseless(n=40, K=2)
    model = _Fn(lambda X: np.zeros(len(X)))
    rep = convexhull_risk_check(model, ds, "mse", n_mix=200)
    assert rep.violations == 0
    R = evaluate(model, ds).env_risks["mse"]
    assert rep.vertex_max == max(R)
    # sizes are equal, so the pooled MSE is the q = (1/2, 1/2) mixture
    assert evaluate(model, ds).pooled_mse == pytest.approx(R.mean(), rel=1e-12)


@pytest.mark.parametrize("kind", ["mse", "nrw"])
def test_hull_no_violations_pwl(kind):
    train, test, _ = generate(default_config("pwl", n_total=600, seed=2))
    model = fit_rf(train, TreeHyperparams(min_leaf_size=15), B=5, seed=1)
    rep = convexhull_risk_check(model, test, kind, n_mix=1000, seed=4)
    assert rep.n_mix == 1000 and rep.violations == 0


def _one_leaf_max(y, env, K):
    v = np.array([y[env == e].var() for e in range(K)])
    m = np.array([y[env == e].mean() for e in range(K)])
    risk = lambda th: float(np.max(v + (m - th) ** 2))
    return risk, m


def test_consistency_single_leaf_closed_form():
    cfg = default_config("pwl", n_per_env=100, seed=0)
    ds, _, _ = generate(cfg)
    tree = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=ds.n))
    assert tree.n_leaves == 1
    pop_n, seed, n = 20000, 8, 300
    rep = consistency_probe(tree, cfg, n_grid=(n,), reps=3, seed=seed, pop_n=pop_n)
    # rebuild the same samples and solve the one-dimensional problem directly
    pop_seed = int(rng_for(seed, 40).integers(2**62))
    pop, _, _ = generate(replace(cfg, n_per_env=pop_n, n_total=None, seed=pop_seed))
    risk_pop, m_pop = _one_leaf_max(pop.y, pop.env, pop.K)
    z0 = minimize_scalar(risk_pop, bounds=(m_pop.min(), m_pop.max()), method="bounded",
                         options={"xatol": 1e-12}).fun
    for r in range(3):
        s = int(rng_for(seed, 41, n, r).integers(2**62))
        tr, _, _ = generate(replace(cfg, n_per_env=n, n_total=None, seed=s))
        risk_tr, m_tr = _one_leaf_max(tr.y, tr.env, tr.K)
        th = minimize_scalar(risk_tr, bounds=(m_tr.min(), m_tr.max()), method="bounded",
                             options={"xatol": 1e-12}).x
        assert rep.excess[n][r] == pytest.approx(risk_pop(th) - z0, abs=1e-4)


def _tiny_cfg(**kw):
    d = {"name": "tiny", "dgp": {"setting": "pwl", "n_total": 240}, "repetitions": 3, "seed": 1,
         "methods": [{"name": "rf", "strategy": "rf", "B": 3, "trees": {"min_leaf_size": 15}},
                     {"name": "posthoc", "strategy": "posthoc", "B": 3,
                      "trees": {"min_leaf_size": 15}}],
         "metrics": ["max_mse", "pooled_mse", "mise", "infeasible_trees"]}
    d.update(kw)
    return d


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        ExperimentConfig.from_dict(_tiny_cfg(colour="red"))
    bad = _tiny_cfg()
    bad["methods"][0]["trees"]["leafsize"] = 3
    with pytest.raises(ConfigError, match="leafsize"):
        ExperimentConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_tiny_cfg(metrics=["accuracy"]))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_tiny_cfg(dgp={"setting": "pwl", "seed": 3}))
    with pytest.raises(ConfigError):
        MethodSpec.from_dict({"name": "x", "strategy": "posthoc", "risk": "mae"})


def test_config_roundtrip_method():
    m = MethodSpec.from_dict({"name": "g", "strategy": "global-w", "solver": {"method": "bcd"}})
    assert MethodSpec.from_dict(json.loads(json.dumps(m.to_dict()))) == m
    assert m.solver.patience == 1


def test_run_experiment_aggregate_recomputes(tmp_path):
    cfg = ExperimentConfig.from_dict(_tiny_cfg())
    t = run_experiment(cfg)
    assert not t.failures
    assert t.methods() == ["rf", "posthoc"]
    assert len(t.values("rf", "max_mse")) == 3
    t.write_csv(tmp_path / "p.csv", tmp_path / "a.csv")
    back = ResultTable.read_csv(tmp_path / "p.csv")
    for (m, k, mean, ci), (m2, k2, mean2, ci2) in zip(t.aggregate(), back.aggregate()):
        assert (m, k) == (m2, k2) and mean == mean2 and ci == ci2
        v = back.values(m, k)
        assert mean == pytest.approx(v.mean(), rel=1e-12)
    # same seed, same numbers
    assert run_experiment(cfg).rows == t.rows


def test_run_experiment_records_failures():
    d = _tiny_cfg()
    d["methods"].append({"name": "reg", "strategy": "posthoc", "risk": "reg", "B": 2,
                         "trees": {"min_leaf_size": 200}})
    t = run_experiment(ExperimentConfig.from_dict(d))
    assert {f[0] for f in t.failures} == {"reg"}
    assert len(t.values("rf", "max_mse")) == 3


def test_single_rep_ci_absent():
    t = run_experiment(ExperimentConfig.from_dict(_tiny_cfg(repetitions=1)))
    assert all(ci is None for *_, ci in t.aggregate())
