import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alqr import EstimatorConfig, EstimatorOutput, make_folds, validate_dataset
from alqr.core import Z_975, weighted_mean, weighted_quantile
from alqr.exceptions import (
    ConfigError,
    DegenerateWeights,
    KTooLarge,
    LengthMismatch,
    NonBinaryExposure,
    NonFiniteValue,
)


def test_minimal_valid_dataset():
    ds = validate_dataset([1, 2], [0, 1], [[0], [1]], "binary")
    assert ds.n == 2 and ds.p == 1
    assert np.array_equal(ds.weights, [1.0, 1.0])
    assert ds.is_binary


def test_dataset_is_read_only():
    ds = validate_dataset([1, 2], [0, 1], [[0], [1]], "binary")
    with pytest.raises(ValueError):
        ds.y[0] = 5.0


def test_non_binary_exposure():
    with pytest.raises(NonBinaryExposure):
        validate_dataset([1, 2], [0, 2], [[0], [1]], "binary")


def test_non_finite():
    with pytest.raises(NonFiniteValue):
        validate_dataset([1, np.nan], [0, 1], None, "binary")
    with pytest.raises(NonFiniteValue):
        validate_dataset([1, 2], [0, 1], [[0], [np.inf]], "binary")


def test_length_and_weights():
    with pytest.raises(LengthMismatch):
        validate_dataset([1, 2, 3], [0, 1], None)
    with pytest.raises(LengthMismatch):
        validate_dataset([1], [0], None)
    with pytest.raises(DegenerateWeights):
        validate_dataset([1, 2], [0, 1], None, weights=[0, 0])
    with pytest.raises(DegenerateWeights):
        validate_dataset([1, 2], [0, 1], None, weights=[-1, 2])


def test_validate_is_idempotent():
    ds = validate_dataset([1, 2, 3], [0, 1, 0], [[0], [1], [2]], "binary", [1, 2, 3])
    again = validate_dataset(ds.y, ds.a, ds.l, ds.exposure_kind, ds.weights)
    assert again == ds


def _ds(n, binary=False, seed=0):
    rng = np.random.default_rng(seed)
    a = (np.arange(n) % 2).astype(float) if binary else rng.normal(size=n)
    return validate_dataset(rng.normal(size=n), a, None, "binary" if binary else "continuous")


def test_fold_sizes_exact():
    plan = make_folds(_ds(10), 5, seed=3)
    assert sorted(np.bincount(plan.assignments)[1:]) == [2] * 5


def test_fold_sizes_remainder():
    plan = make_folds(_ds(11), 5, seed=3)
    assert sorted(np.bincount(plan.assignments)[1:]) == [2, 2, 2, 2, 3]


def test_folds_deterministic_and_partition():
    ds = _ds(37)
    p1, p2 = make_folds(ds, 4, 9), make_folds(ds, 4, 9)
    assert p1 == p2
    seen = np.concatenate([test for _, _, test in p1.splits()])
    assert np.array_equal(np.sort(seen), np.arange(37))
    for _, train, test in p1.splits():
        assert np.intersect1d(train, test).size == 0


def test_folds_k_too_large_and_k1():
    with pytest.raises(KTooLarge):
        make_folds(_ds(5), 6, 0)
    plan = make_folds(_ds(5), 1, 0)
    _, train, test = next(plan.splits())
    assert np.array_equal(train, test) and train.size == 5


@given(n=st.integers(10, 80), k=st.integers(2, 5), seed=st.integers(0, 2**32))
@settings(max_examples=50, deadline=None)
def test_binary_folds_stratified(n, k, seed):
    plan = make_folds(_ds(n, binary=True), k, seed)
    sizes = np.bincount(plan.assignments)[1:]
    assert sizes.max() - sizes.min() <= 1
    assert plan.stratified
    ds = _ds(n, binary=True)
    for _, _, test in plan.splits():
        assert set(ds.a[test]) == {0.0, 1.0}


def test_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig(tau=1.0)
    with pytest.raises(ConfigError):
        EstimatorConfig(folds=0)
    with pytest.raises(ConfigError):
        EstimatorConfig(estimator="bogus")
    with pytest.raises(ConfigError):
        EstimatorConfig(mean_learner="svm")
    assert EstimatorConfig(estimator="dml-vs").estimator.uses_selection


def test_output_build_and_roundtrip():
    out = EstimatorOutput.build(1.5, 0.2, 0.5, "dml", trace=[np.float64(1.0)])
    assert out.ci_low == 1.5 - Z_975 * 0.2 and out.ci_high == 1.5 + Z_975 * 0.2
    assert math.isclose(Z_975, 1.959964, abs_tol=1e-6)
    assert out.covers(1.5) and not out.covers(3.0)
    back = EstimatorOutput.from_dict(json.loads(json.dumps(out.to_dict())))
    assert back == EstimatorOutput.from_dict(out.to_dict())
    assert back.psi_hat == out.psi_hat and back.ci_high == out.ci_high


def test_weighted_helpers():
    assert weighted_mean([1, 3], [1, 3]) == 2.5
    assert weighted_quantile([1, 2, 3, 4], [1, 1, 1, 1], 0.5) == 2
    assert weighted_quantile([1, 2, 3, 4], [1, 1, 1, 1], 0.75) == 3
