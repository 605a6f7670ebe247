import numpy as np
import pytest

from alqr import EstimatorConfig, QuantileEffectEstimator, estimate
from alqr.engine import fit_nuisance_models, fold_plan_for
from alqr.estimator import estimate_from_models
from alqr.exceptions import ConfigError

from conftest import linear_dataset

FAST = dict(num_trees=40, mean_learner="linear")


@pytest.mark.parametrize("est", ["plugin", "dml", "tmle", "dml-vs", "tmle-vs"])
@pytest.mark.parametrize("binary", [False, True])
def test_all_estimators_run(est, binary):
    ds = linear_dataset(150, seed=3, binary=binary)
    out = estimate(ds, EstimatorConfig(estimator=est, folds=3, seed=4, **FAST))
    assert np.isfinite(out.psi_hat) and out.se > 0
    assert out.diagnostics["folds"] == 3
    assert abs(out.diagnostics["if_mean"]) <= 1e-10 * out.diagnostics["if_scale"]
    again = estimate(ds, EstimatorConfig(estimator=est, folds=3, seed=4, **FAST))
    assert again == out


def test_models_reused_across_tau(cont_data):
    cfg = EstimatorConfig(estimator="dml", folds=2, seed=1, **FAST)
    models = fit_nuisance_models(cont_data, cfg, fold_plan_for(cont_data, cfg))
    for tau in (0.25, 0.75):
        c = cfg.with_(tau=tau)
        assert estimate_from_models(cont_data, c, models) == estimate(cont_data, c)


def test_log_link_rules(cont_data):
    y = np.exp(cont_data.y / 4)
    from alqr import validate_dataset
    pos = validate_dataset(y, cont_data.a, cont_data.l)
    out = estimate(pos, EstimatorConfig(estimator="dml", link="log", folds=2, **FAST))
    assert abs(out.diagnostics["if_mean"]) <= 1e-10 * out.diagnostics["if_scale"]
    with pytest.raises(ConfigError):
        estimate(pos, EstimatorConfig(estimator="tmle", link="log", **FAST))
    with pytest.raises(ConfigError):
        estimate(pos, EstimatorConfig(estimator="dml-vs", link="log", **FAST))


def test_sklearn_estimator():
    ds = linear_dataset(300, seed=5)
    est = QuantileEffectEstimator(estimator="dml", folds=2, num_trees=60, mean_learner="linear")
    est.fit(ds.l, ds.y, ds.a)
    assert est.ci_[0] < est.psi_ < est.ci_[1]
    assert est.summary()["psi_hat"] == est.psi_
