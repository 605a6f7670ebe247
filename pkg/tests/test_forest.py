import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alqr.exceptions import ConfigError, EmptyForest
from alqr.learners import (
    ForestParams,
    QuantileForest,
    RegressionForest,
    fit_quantile_forest,
    fit_regression_forest,
    qf_predict,
)


def _leaves(trees, t):
    """(start, end) of every leaf reachable from the root of tree t."""
    out, stack = [], [0]
    while stack:
        node = stack.pop()
        if trees.node_feat[t, node] < 0:
            out.append((trees.node_start[t, node], trees.node_end[t, node]))
        else:
            stack.extend([trees.node_left[t, node], trees.node_right[t, node]])
    return out


def _data(n=120, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = X[:, 0] + np.abs(X[:, 1]) * rng.normal(size=n)
    return X, y


def test_constant_outcome():
    X, _ = _data()
    model = fit_quantile_forest(X, np.full(X.shape[0], 3.5), ForestParams(num_trees=20), seed=1)
    for tau in (0.1, 0.5, 0.9):
        assert np.all(qf_predict(model, X[:10], tau) == 3.5)


def test_single_leaf_median():
    X = np.arange(4.0).reshape(-1, 1)
    params = ForestParams(num_trees=1, min_leaf=4, subsample=1.0, honesty=False)
    model = fit_quantile_forest(X, [1.0, 2.0, 3.0, 4.0], params, seed=0)
    assert qf_predict(model, [[1.5]], 0.5)[0] == 2.0


@given(seed=st.integers(0, 10_000), n=st.integers(20, 80), honest=st.booleans())
@settings(max_examples=200, deadline=None)
def test_forest_properties(seed, n, honest):
    """tau-monotone, within the outcome range, deterministic."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = X[:, 0] + rng.exponential(size=n)
    params = ForestParams(num_trees=10, min_leaf=3, honesty=honest)
    model = fit_quantile_forest(X, y, params, seed=seed)
    Xq = rng.normal(size=(15, 2))
    taus = np.array([0.05, 0.25, 0.5, 0.75, 0.95])
    pred = model.predict(Xq, taus)
    assert np.all(np.diff(pred, axis=1) >= 0)
    assert pred.min() >= y.min() and pred.max() <= y.max()
    again = fit_quantile_forest(X, y, params, seed=seed).predict(Xq, taus)
    assert np.array_equal(pred, again)


def test_leaf_sizes():
    X, y = _data()
    plain = fit_quantile_forest(X, y, ForestParams(num_trees=10, min_leaf=7, honesty=False), seed=2)
    for t in range(10):
        assert all(e - s >= 7 for s, e in _leaves(plain.trees, t))
    honest = fit_quantile_forest(X, y, ForestParams(num_trees=10, min_leaf=7), seed=2)
    for t in range(10):
        assert all(e > s for s, e in _leaves(honest.trees, t))


def test_seed_changes_forest():
    X, y = _data()
    a = qf_predict(fit_quantile_forest(X, y, ForestParams(num_trees=5), seed=1), X, 0.5)
    b = qf_predict(fit_quantile_forest(X, y, ForestParams(num_trees=5), seed=2), X, 0.5)
    assert not np.array_equal(a, b)


def test_oob_prediction():
    X, y = _data()
    model = fit_quantile_forest(X, y, ForestParams(num_trees=50), seed=3)
    oob = qf_predict(model, X, 0.5, oob=True)
    assert oob.shape == y.shape and np.all(np.isfinite(oob))
    with pytest.raises(ValueError):
        model.predict(X[:5], [0.5], oob=True)


def test_forest_tracks_signal():
    X, y = _data(400, seed=5)
    model = fit_quantile_forest(X, y, ForestParams(num_trees=100), seed=0)
    pred = qf_predict(model, X, 0.5, oob=True)
    assert np.corrcoef(pred, X[:, 0])[0, 1] > 0.7


def test_regression_forest():
    X, y = _data(300, seed=6)
    model = fit_regression_forest(X, y, ForestParams(num_trees=50), seed=0)
    pred = model.predict(X)
    assert np.corrcoef(pred, X[:, 0])[0, 1] > 0.8
    assert np.all(np.isfinite(model.predict(X, oob=True)))


def test_errors():
    with pytest.raises(EmptyForest):
        fit_quantile_forest(np.empty((0, 2)), np.empty(0))
    with pytest.raises(ConfigError):
        fit_quantile_forest(np.ones((5, 1)), np.arange(5.0), ForestParams(splitting="gradient"))
    with pytest.raises(ConfigError):
        fit_quantile_forest(np.ones((5, 1)), np.arange(5.0), ForestParams(num_trees=0))


def test_sklearn_wrappers():
    X, y = _data()
    qf = QuantileForest(tau=[0.25, 0.75], num_trees=20).fit(X, y)
    out = qf.predict(X[:4])
    assert out.shape == (4, 2) and np.all(out[:, 0] <= out[:, 1])
    assert qf.predict(X[:4], tau=0.5).shape == (4,)
    assert qf.oob_predict(X, tau=0.5).shape == (X.shape[0],)
    rf = RegressionForest(num_trees=20).fit(X, y)
    assert rf.predict(X).shape == (X.shape[0],)
