"""Top-level estimation entry points."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Estimator, EstimatorConfig, Link, validate_dataset
from .engine import (
    dml_estimate,
    fit_nuisance_models,
    fold_plan_for,
    make_link,
    nuisances_for_tau,
    plugin_output,
    vs_nuisances,
)
from .exceptions import ConfigError
from .targeting import dml_vs, tmle_binary, tmle_continuous_onestep, tmle_vs


def _diagnostics(out, plan):
    diag = dict(out.diagnostics)
    diag.setdefault("n_iterations", 0)
    diag.setdefault("epsilon_trace", [])
    diag.setdefault("targeting_residual", 0.0)
    diag["fold_seed"] = int(plan.seed)
    diag["folds"] = int(plan.k)
    diag["stratified"] = bool(plan.stratified)
    return type(out)(out.psi_hat, out.se, out.ci_low, out.ci_high, out.tau, out.estimator, diag)


def estimate_from_models(dataset, config, models):
    """Estimate with forest-based nuisance learners already fitted (see
    :func:`alqr.engine.fit_nuisance_models`), e.g. to reuse them across tau."""
    est = Estimator(config.estimator)
    link = make_link(config.link)
    if est is Estimator.TMLE and link.kind is not Link.IDENTITY:
        raise ConfigError("targeted estimators support only the identity link")
    need_h = est is Estimator.TMLE and not dataset.is_binary
    nuis = nuisances_for_tau(models, dataset, config.tau, config, link=link, need_h=need_h)
    if est is Estimator.PLUGIN:
        out = plugin_output(nuis, dataset, config.tau, link)
    elif est is Estimator.DML:
        out = dml_estimate(nuis, dataset, config.tau, link)
    elif dataset.is_binary:
        out = tmle_binary(dataset, nuis, config.tau, config)
    else:
        out = tmle_continuous_onestep(dataset, nuis, config.tau, config)
    return _diagnostics(out, models.plan)


def estimate(dataset, config):
    """Run the configured estimator on a validated :class:`~alqr.core.Dataset`.

    Raises
    ------
    ConfigError
        For the log link combined with a targeted or variable-selection
        estimator.
    """
    est = Estimator(config.estimator)
    plan = fold_plan_for(dataset, config)
    if est.uses_selection:
        if make_link(config.link).kind is not Link.IDENTITY:
            raise ConfigError("variable-selection estimators support only the identity link")
        nuis = vs_nuisances(dataset, config.tau, config, plan)
        fn = tmle_vs if est is Estimator.TMLE_VS else dml_vs
        return _diagnostics(fn(dataset, config.tau, config, nuisances=nuis), plan)
    if est is Estimator.TMLE and make_link(config.link).kind is not Link.IDENTITY:
        raise ConfigError("targeted estimators support only the identity link")
    models = fit_nuisance_models(dataset, config, plan)
    return estimate_from_models(dataset, config, models)


class QuantileEffectEstimator(BaseEstimator):
    """Estimate the exposure coefficient of a partially linear quantile model.

    Parameters mirror :class:`~alqr.core.EstimatorConfig`. After ``fit``,
    ``psi_``, ``se_``, ``ci_`` and ``result_`` (an
    :class:`~alqr.core.EstimatorOutput`) are available.

    Examples
    --------
    >>> est = QuantileEffectEstimator(tau=0.5, estimator="tmle", folds=5)
    >>> est.fit(L, y, a).psi_  # doctest: +SKIP
    """

    def __init__(self, tau=0.5, estimator="tmle", folds=5, seed=0, link="identity", tmle_mode="iterate",
                 num_trees=500, min_leaf=5, mtry=None, subsample=0.5, mean_learner="auto", mean_trees=100,
                 exposure_kind="auto"):
        self.tau = tau
        self.estimator = estimator
        self.folds = folds
        self.seed = seed
        self.link = link
        self.tmle_mode = tmle_mode
        self.num_trees = num_trees
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.subsample = subsample
        self.mean_learner = mean_learner
        self.mean_trees = mean_trees
        self.exposure_kind = exposure_kind

    def _config(self):
        return EstimatorConfig(
            tau=self.tau, estimator=self.estimator, folds=self.folds, seed=self.seed, link=self.link,
            tmle_mode=self.tmle_mode, num_trees=self.num_trees, min_leaf=self.min_leaf, mtry=self.mtry,
            subsample=self.subsample, mean_learner=self.mean_learner, mean_trees=self.mean_trees,
        )

    def fit(self, L, y, a, sample_weight=None):
        kind = self.exposure_kind
        if kind == "auto":
            a_arr = np.asarray(a, dtype=float)
            kind = "binary" if np.all((a_arr == 0) | (a_arr == 1)) else "continuous"
        dataset = validate_dataset(y, a, L, kind, sample_weight)
        self.result_ = estimate(dataset, self._config())
        self.psi_ = self.result_.psi_hat
        self.se_ = self.result_.se
        self.ci_ = (self.result_.ci_low, self.result_.ci_high)
        return self

    def summary(self):
        check_is_fitted(self, "result_")
        return self.result_.to_dict()
