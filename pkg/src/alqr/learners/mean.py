"""Conditional-mean learners with a discrete cross-validation selector.

Candidates are weighted least squares (continuous targets) or logistic
regression (binary targets) and a regression forest. Each candidate is
scored by 5-fold weighted cross-validated squared error (on probabilities
for binary targets), and the one with the smallest risk is refit on all
rows.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .._rng import derive_seed, make_rng
from ..exceptions import AllLearnersFailed, ConfigError, NotConverged, SingularDesign
from .forest import ForestParams, fit_regression_forest

PROB_CLIP = (0.01, 0.99)
CV_FOLDS = 5
MIN_ROWS_FOR_CV = 10


class Family(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class MeanKind(str, enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    FOREST = "forest"


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def _fit_linear(X, y, w):
    D = _with_intercept(X)
    sw = np.sqrt(w)
    Dw = D * sw[:, None]
    if np.linalg.matrix_rank(Dw) < D.shape[1]:
        raise SingularDesign(f"linear design with {D.shape[1]} columns is rank deficient")
    coef, *_ = np.linalg.lstsq(Dw, y * sw, rcond=None)
    return coef


def _fit_logistic(X, y, w, max_iter=100, tol=1e-10):
    """Weighted logistic regression by iteratively reweighted least squares.

    The linear predictor is capped at +-30 so separable data still yields
    finite coefficients (their predictions are clipped downstream anyway).
    """
    D = _with_intercept(X)
    if np.linalg.matrix_rank(D[w > 0]) < D.shape[1]:
        raise SingularDesign(f"logistic design with {D.shape[1]} columns is rank deficient")
    beta = np.zeros(D.shape[1])
    for _ in range(max_iter):
        eta = np.clip(D @ beta, -30.0, 30.0)
        mu = 1.0 / (1.0 + np.exp(-eta))
        var = np.maximum(mu * (1.0 - mu), 1e-10)
        z = eta + (y - mu) / var
        sw = np.sqrt(w * var)
        new, *_ = np.linalg.lstsq(D * sw[:, None], z * sw, rcond=None)
        if not np.all(np.isfinite(new)):
            raise NotConverged("logistic regression diverged")
        step = np.max(np.abs(new - beta))
        beta = new
        if step <= tol * (1.0 + np.max(np.abs(beta))):
            break
        if np.max(np.abs(D @ beta)) > 30.0:
            # (quasi-)separation: further iterations only grow the coefficients
            break
    return beta


def _logistic_predict(X, beta):
    eta = np.clip(_with_intercept(X) @ beta, -30.0, 30.0)
    return 1.0 / (1.0 + np.exp(-eta))


@dataclass(frozen=True, eq=False)
class MeanModel:
    """Fitted conditional-mean model selected by cross-validation.

    ``cv_risk`` is the selected candidate's cross-validated risk (in-sample
    risk when there were too few rows to cross-validate); ``candidate_risks``
    holds every candidate's risk (``inf`` for candidates that failed to fit).
    """

    kind: MeanKind
    family: Family
    params: object
    cv_risk: float
    candidate_risks: dict = field(default_factory=dict)

    def predict(self, X):
        X = _as_2d(X)
        if self.kind is MeanKind.LINEAR:
            out = _with_intercept(X) @ self.params
        elif self.kind is MeanKind.LOGISTIC:
            out = _logistic_predict(X, self.params)
        else:
            out = self.params.predict(X)
        if self.family is Family.BINARY:
            out = np.clip(out, *PROB_CLIP)
        return out

    def training_predict(self, X):
        """Predictions for the training rows (in order) that avoid reusing a
        row's own outcome where the learner allows it: out-of-bag for the
        forest, fitted values for the parametric models."""
        if self.kind is not MeanKind.FOREST:
            return self.predict(X)
        out = self.params.predict(_as_2d(X), oob=True)
        return np.clip(out, *PROB_CLIP) if self.family is Family.BINARY else out


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def _fit_candidate(kind, X, y, w, seed, params):
    if kind is MeanKind.LINEAR:
        return _fit_linear(X, y, w)
    if kind is MeanKind.LOGISTIC:
        return _fit_logistic(X, y, w)
    return fit_regression_forest(X, y, params, seed)


def fit_mean_learner(features, target, family="continuous", weights=None, seed=0, learner="auto",
                     forest_params=None):
    """Fit E[target | features] by discrete cross-validated selection.

    Parameters
    ----------
    features : array of shape (n, p); p may be 0 (intercept-only model)
    target : array of shape (n,)
    family : {"continuous", "binary"}
    weights : nonnegative sampling weights, default all ones
    learner : {"auto", "linear", "forest"}
        ``"auto"`` selects between the parametric and forest candidates;
        the others restrict the library to one candidate ("linear" means the
        logistic model for binary targets).
    forest_params : ForestParams, default 100 trees

    Raises
    ------
    AllLearnersFailed
        When no candidate can be fitted.
    """
    family = Family(getattr(family, "value", family))
    if learner not in ("auto", "linear", "forest"):
        raise ConfigError(f"unknown mean learner {learner!r}")
    X = _as_2d(features)
    y = np.asarray(target, dtype=float).reshape(-1)
    n = y.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    forest_params = forest_params or ForestParams(num_trees=100)
    param_kind = MeanKind.LOGISTIC if family is Family.BINARY else MeanKind.LINEAR
    if learner == "linear" or n < MIN_ROWS_FOR_CV or X.shape[1] == 0:
        kinds = [param_kind]
    elif learner == "forest":
        kinds = [MeanKind.FOREST]
    else:
        kinds = [param_kind, MeanKind.FOREST]

    risks = {}
    cross_validate = n >= MIN_ROWS_FOR_CV
    if cross_validate:
        rng = make_rng(derive_seed(seed, 0x6D65616E))
        folds = np.empty(n, dtype=np.int64)
        folds[rng.permutation(n)] = np.arange(n) % CV_FOLDS
        for kind in kinds:
            pred = np.empty(n)
            try:
                for f in range(CV_FOLDS):
                    tr = folds != f
                    te = ~tr
                    model = MeanModel(kind, family,
                                      _fit_candidate(kind, X[tr], y[tr], w[tr], derive_seed(seed, f + 1), forest_params),
                                      float("nan"))
                    pred[te] = model.predict(X[te])
                risks[kind.value] = float(np.dot(w, (y - pred) ** 2) / w.sum())
            except (SingularDesign, NotConverged, np.linalg.LinAlgError):
                risks[kind.value] = float("inf")
    else:
        risks = {k.value: 0.0 for k in kinds}

    # refit on all rows, best risk first; ties keep library order
    ranked = sorted(kinds, key=lambda k: (risks[k.value], kinds.index(k)))
    for kind in ranked:
        if risks[kind.value] == float("inf"):
            continue
        try:
            params = _fit_candidate(kind, X, y, w, derive_seed(seed, 0), forest_params)
        except (SingularDesign, NotConverged, np.linalg.LinAlgError):
            risks[kind.value] = float("inf")
            continue
        model = MeanModel(kind, family, params, risks[kind.value], risks)
        if not cross_validate:
            # too few rows to cross-validate: report the in-sample risk
            risk = float(np.dot(w, (y - model.predict(X)) ** 2) / w.sum())
            risks[kind.value] = risk
            model = MeanModel(kind, family, params, risk, risks)
        return model
    raise AllLearnersFailed(f"no mean learner could be fitted (risks: {risks})")


def mean_predict(model, features):
    return model.predict(features)


class MeanLearner(RegressorMixin, BaseEstimator):
    """sklearn-style wrapper around :func:`fit_mean_learner`."""

    def __init__(self, family="continuous", learner="auto", num_trees=100, seed=0):
        self.family = family
        self.learner = learner
        self.num_trees = num_trees
        self.seed = seed

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        self.model_ = fit_mean_learner(X, y, self.family, sample_weight, self.seed, self.learner,
                                       ForestParams(num_trees=self.num_trees))
        self.kind_ = self.model_.kind
        self.cv_risk_ = self.model_.cv_risk
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X))
