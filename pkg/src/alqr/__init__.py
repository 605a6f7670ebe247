"""Assumption-lean inference for the exposure effect in a partially linear
quantile model: Q_tau(Y | A, L) = beta_tau A + omega_tau(L)."""

from .core import (
    Dataset,
    Estimator,
    EstimatorConfig,
    EstimatorOutput,
    ExposureKind,
    FoldPlan,
    Link,
    TmleMode,
    make_folds,
    validate_dataset,
)
from .estimator import QuantileEffectEstimator, estimate
from .exceptions import AlqrError, InputError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Estimator", "EstimatorConfig", "EstimatorOutput", "ExposureKind", "FoldPlan", "Link",
    "TmleMode", "make_folds", "validate_dataset", "QuantileEffectEstimator", "estimate", "AlqrError",
    "InputError", "NumericalError", "__version__",
]
