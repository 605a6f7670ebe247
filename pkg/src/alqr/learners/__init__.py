"""Nuisance learners: quantile regression, forests, mean models, densities."""

from .density import DensityEstimate, residual_density_at_quantile
from .forest import (
    ForestParams,
    QuantileForest,
    QuantileForestModel,
    RegressionForest,
    fit_quantile_forest,
    fit_regression_forest,
    qf_predict,
)
from .mean import MeanLearner, MeanModel, fit_mean_learner, mean_predict
from .qr import (
    LinearQuantileRegression,
    QrFit,
    StepwiseQuantileRegression,
    check_loss,
    fit_parametric_qr,
    stepwise_qr_aic,
)

__all__ = [
    "DensityEstimate", "residual_density_at_quantile", "ForestParams", "QuantileForest",
    "QuantileForestModel", "RegressionForest", "fit_quantile_forest", "fit_regression_forest",
    "qf_predict", "MeanLearner", "MeanModel", "fit_mean_learner", "mean_predict",
    "LinearQuantileRegression", "QrFit", "StepwiseQuantileRegression", "check_loss",
    "fit_parametric_qr", "stepwise_qr_aic",
]
