import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maxrm.cart import (Forest, Tree, TreeHyperparams, best_sse_split, fit_cart_tree,
                        leaf_assignment, predict_forest, predict_tree, restat)
from maxrm.dataplane import EnvDataset, default_config, generate


def _ds(x, y, env=None, K=1):
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    env = np.zeros(len(y), dtype=int) if env is None else np.asarray(env)
    return EnvDataset(x, np.asarray(y, dtype=float), env, K)


def test_step_function_split():
    ds = _ds([-2, -1, 1, 2], [0, 0, 1, 1])
    t = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=1, m_try=1))
    assert t.n_leaves == 2
    assert -1 < t.threshold[0] < 1
    assert sorted(t.values) == [0.0, 1.0]


def test_constant_response_single_leaf():
    ds = _ds(np.arange(20.0), np.full(20, 3.5))
    t = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=1))
    assert t.n_leaves == 1 and t.values[0] == 3.5


def test_leaf_values_are_sample_means():
    train, _, _ = generate(default_config("pwl", n_per_env=100, seed=1))
    one = EnvDataset(train.X, train.y, np.zeros(train.n, dtype=int), 1)
    t = fit_cart_tree(one, TreeHyperparams(min_leaf_size=10))
    leaf = t.apply(one.X)
    for j in range(t.n_leaves):
        assert t.values[j] == pytest.approx(one.y[leaf == j].mean(), rel=1e-12)
        assert (leaf == j).sum() >= 10


def test_depth_limit():
    train, _, _ = generate(default_config("pwl", n_per_env=100, seed=1))
    t = fit_cart_tree(train, TreeHyperparams(max_depth=2, min_leaf_size=1))
    assert t.n_leaves <= 4


def test_tie_break_lowest_feature_then_threshold():
    # both features separate identically; the first feature wins
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    f, thr, _ = best_sse_split(X, np.array([0.0, 0.0, 1.0, 1.0]), np.arange(4), np.array([0, 1]), 1)
    assert f == 0 and thr == 1.5
    # symmetric data: gains of thresholds 0.5 and 2.5 tie, the lower wins
    f, thr, _ = best_sse_split(X, np.array([1.0, 0.0, 0.0, 1.0]), np.arange(4), np.array([0]), 1)
    assert thr == 0.5


def test_split_is_exhaustive_best():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    y = rng.normal(size=40)
    f, thr, gain = best_sse_split(X, y, np.arange(40), np.arange(3), 3)
    base = ((y - y.mean()) ** 2).sum()
    best = -np.inf
    for j in range(3):
        xs = np.unique(X[:, j])
        for a, b in zip(xs[:-1], xs[1:]):
            left = X[:, j] <= (a + b) / 2
            if left.sum() < 3 or (~left).sum() < 3:
                continue
            sse = ((y[left] - y[left].mean()) ** 2).sum() + ((y[~left] - y[~left].mean()) ** 2).sum()
            best = max(best, base - sse)
    assert gain == pytest.approx(best, rel=1e-9)


def test_deterministic_given_seed():
    train, _, _ = generate(default_config("gp-noshift", n_per_env=60, seed=2))
    hp = TreeHyperparams(min_leaf_size=5, m_try=2, seed=9)
    a, b = fit_cart_tree(train, hp), fit_cart_tree(train, hp)
    assert np.array_equal(a.feature, b.feature) and np.array_equal(a.threshold, b.threshold)


def test_leaf_assignment_and_cached_stats():
    train, _, _ = generate(default_config("pwl", n_per_env=80, seed=3))
    t = fit_cart_tree(train, TreeHyperparams(min_leaf_size=8))
    la = leaf_assignment(t, train)
    for e in range(train.K):
        A = la.matrix(e)
        assert np.all(A.sum(axis=1) == 1)
        assert np.array_equal(A.sum(axis=0), t.stats.count[e])
    s = restat(t, train)
    assert np.array_equal(s.count, t.stats.count)
    assert np.allclose(s.mean, t.stats.mean) and np.allclose(s.ssd, t.stats.ssd)


def test_single_leaf_assignment():
    ds = _ds(np.arange(5.0), np.ones(5))
    t = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=5))
    assert np.all(leaf_assignment(t, ds).leaf == 0)


def _const_tree(v):
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([0]),
                np.array([float(v)]))


def test_forest_predictions():
    X = np.zeros((3, 1))
    f = Forest([_const_tree(0), _const_tree(2)], np.array([0.5, 0.5]))
    assert np.allclose(predict_forest(f, X), 1)
    assert np.allclose(Forest([_const_tree(7)]).predict(X), predict_tree(_const_tree(7), X))
    assert np.allclose(Forest([_const_tree(0), _const_tree(2)], np.array([0.0, 1.0])).predict(X), 2)
    with pytest.raises(ValueError):
        Forest([_const_tree(0)], np.array([0.5]))


def test_forest_json_roundtrip():
    train, test, _ = generate(default_config("pwl", n_per_env=50, seed=4))
    trees = [fit_cart_tree(train, TreeHyperparams(min_leaf_size=5, seed=s)) for s in range(2)]
    f = Forest(trees, np.array([0.3, 0.7]))
    g = Forest.from_dict(f.to_dict())
    assert np.array_equal(f.predict(test.X), g.predict(test.X))


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        TreeHyperparams(min_leaf_size=0)
    with pytest.raises(ValueError):
        TreeHyperparams(m_try=0)
    with pytest.raises(ValueError):
        TreeHyperparams(m_try=3).mtry_for(2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(0, 10_000))
def test_partition_property(n, leaf, seed):
    rng = np.random.default_rng(seed)
    ds = _ds(rng.normal(size=(n, 2)), rng.normal(size=n), rng.integers(0, 2, n), 2)
    t = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=leaf, seed=seed))
    L = t.apply(ds.X)
    assert L.min() >= 0 and L.max() < t.n_leaves
    assert t.stats.count.sum() == n
    if t.n_leaves > 1:
        assert t.stats.count.sum(axis=0).min() >= leaf
