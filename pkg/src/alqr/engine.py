"""Nuisance estimation, the estimand and its influence function.

The target is

    Psi_tau = E[(A - m(L)) (Q(A, L) - v(L))] / E[(A - m(L))^2]

with ``m(L) = E(A | L)``, ``Q(A, L) = Q_tau(Y | A, L)`` and
``v(L) = E{Q(A, L) | L}``. Its efficient influence function is

    phi = (A - m) / D * [Q - v + (tau - 1{Y <= Q}) / f - Psi (A - m)]

where ``D = E[(A - m)^2]`` and ``f`` is the density of ``Y`` at ``Q`` given
``(A, L)``. All sample averages are weight-normalized (Hajek):
``sum(w x) / sum(w)``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_seed, make_rng
from .core import EstimatorOutput, Link, make_folds
from .exceptions import (
    DegenerateExposureVariance,
    DegeneratePropensity,
    LengthMismatch,
    NonPositiveQuantile,
)
from .learners.density import qr_residual_density, residual_density_at_quantile
from .learners.forest import ForestParams, fit_quantile_forest
from .learners.mean import fit_mean_learner
from .learners.qr import stepwise_design, stepwise_qr_aic

VARIANCE_GUARD = 1e-8

# seed streams for the learners of one fold
_STREAM_FOREST = 1
_STREAM_M = 2
_STREAM_V = 3
_STREAM_H = 4
_STREAM_VLOG = 5


# ---------------------------------------------------------------------------
# links


@dataclass(frozen=True)
class LinkSpec:
    """Monotone link ``g`` applied to the conditional quantile."""

    kind: Link

    def g(self, q):
        if self.kind is Link.IDENTITY:
            return q
        q = np.asarray(q, dtype=float)
        if np.any(q <= 0):
            raise NonPositiveQuantile("log link requires strictly positive quantiles")
        return np.log(q)

    def g_prime(self, q):
        if self.kind is Link.IDENTITY:
            return 1.0
        q = np.asarray(q, dtype=float)
        if np.any(q <= 0):
            raise NonPositiveQuantile("log link requires strictly positive quantiles")
        return 1.0 / q


def make_link(kind):
    return LinkSpec(Link(getattr(kind, "value", kind)))


IDENTITY = LinkSpec(Link.IDENTITY)


# ---------------------------------------------------------------------------
# nuisance container


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    """Per-row nuisance values, cross-fitted when ``k > 1``.

    ``v_log`` is ``E{log Q | L}`` (log link only); ``h`` is ``E[w | L]`` for
    the clever covariate ``w = (a - m) / d`` (one-step targeting only);
    ``beta`` holds the parametric exposure coefficient of each row's fold
    (variable-selection nuisances only).
    """

    m: np.ndarray
    q: np.ndarray
    v: np.ndarray
    d: np.ndarray
    fold_of: np.ndarray
    tau: float
    q1: np.ndarray | None = None
    q0: np.ndarray | None = None
    v_log: np.ndarray | None = None
    h: np.ndarray | None = None
    beta: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.m.shape[0]
        for name in ("q", "v", "d", "fold_of", "q1", "q0", "v_log", "h", "beta"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise LengthMismatch(f"nuisance {name} has length {arr.shape[0]}, expected {n}")
        if np.any(~(self.d > 0)):
            raise ValueError("densities must be strictly positive")

    @property
    def n(self):
        return self.m.shape[0]

    def with_(self, **changes):
        return replace(self, **changes)


def _subset(arr, idx):
    return None if arr is None else arr[idx]


# ---------------------------------------------------------------------------
# estimator formulas


def exposure_denominator(a, m, weights):
    """Weighted mean of ``(a - m)^2`` with the variance guard.

    Raises
    ------
    DegenerateExposureVariance
        When it does not exceed ``1e-8 * Var(a)`` (or is not positive), or
        when the exposure is constant.
    """
    wsum = weights.sum()
    denom = float(np.dot(weights, (a - m) ** 2) / wsum)
    abar = float(np.dot(weights, a) / wsum)
    var_a = float(np.dot(weights, (a - abar) ** 2) / wsum)
    if not var_a > (np.finfo(float).eps * max(1.0, abs(abar))) ** 2:
        # a constant exposure: the relative guard below would compare roundoff with 0
        raise DegenerateExposureVariance("exposure is constant")
    if not denom > VARIANCE_GUARD * var_a or not denom > 0:
        raise DegenerateExposureVariance(
            f"mean squared exposure residual {denom:.3g} is below {VARIANCE_GUARD:g} * Var(a) = {VARIANCE_GUARD * var_a:.3g}"
        )
    return denom


def _link_parts(nuisances, link):
    """``(g(q) - v_g, g'(q))`` for the given link."""
    if link.kind is Link.IDENTITY:
        return nuisances.q - nuisances.v, 1.0
    if nuisances.v_log is None:
        raise ValueError("log link requires v_log nuisances")
    return link.g(nuisances.q) - nuisances.v_log, link.g_prime(nuisances.q)


def indicator(y, q):
    """``1{y <= q}`` as floats; equality counts as 1."""
    return (np.asarray(y) <= np.asarray(q)).astype(float)


def plugin_estimate(nuisances, dataset, link=IDENTITY):
    """``sum w (a - m)(g(q) - v_g) / sum w (a - m)^2``."""
    w = dataset.weights
    res = dataset.a - nuisances.m
    exposure_denominator(dataset.a, nuisances.m, w)
    centered, _ = _link_parts(nuisances, link)
    return float(np.dot(w, res * centered) / np.dot(w, res * res))


def eif_evaluate(y, a, m, q, v, d, psi, tau, denom, link=IDENTITY, v_g=None):
    """Efficient influence function values (vectorized over rows).

    ``v`` is ``E[g(Q) | L]`` on the link scale; pass ``v_g`` to override it
    (kept for readability at call sites using the log link).
    """
    v = v if v_g is None else v_g
    res = np.asarray(a, dtype=float) - m
    correction = (tau - indicator(y, q)) * link.g_prime(q) / d
    return res / denom * (link.g(q) - v + correction - psi * res)


def _if_se(phi, w):
    return float(math.sqrt(np.dot(w * w, phi * phi)) / w.sum())


def _if_parts(nuisances, dataset, tau, link):
    centered, gp = _link_parts(nuisances, link)
    correction = (tau - indicator(dataset.y, nuisances.q)) * gp / nuisances.d
    return centered, correction


def dml_estimate(nuisances, dataset, tau, link=IDENTITY, name="dml", **diagnostics):
    """Debiased (one-step) estimator with influence-function standard error.

    ``psi = sum w (a - m)[g(q) - v_g + (tau - 1{y <= q}) g'(q) / d] / sum w (a - m)^2``
    """
    w = dataset.weights
    res = dataset.a - nuisances.m
    denom = exposure_denominator(dataset.a, nuisances.m, w)
    centered, correction = _if_parts(nuisances, dataset, tau, link)
    psi = float(np.dot(w, res * (centered + correction)) / np.dot(w, res * res))
    phi = res / denom * (centered + correction - psi * res)
    return EstimatorOutput.build(
        psi, _if_se(phi, w), tau, name,
        if_mean=float(np.dot(w, phi) / w.sum()),
        if_scale=float(np.sqrt(np.dot(w, phi * phi) / w.sum())),
        denominator=denom,
        **diagnostics,
    )


def plugin_output(nuisances, dataset, tau, link=IDENTITY, name="plugin", **diagnostics):
    """Plug-in estimate with the standard error of its (uncorrected) influence function."""
    w = dataset.weights
    res = dataset.a - nuisances.m
    denom = exposure_denominator(dataset.a, nuisances.m, w)
    centered, _ = _link_parts(nuisances, link)
    psi = float(np.dot(w, res * centered) / np.dot(w, res * res))
    phi = res / denom * (centered - psi * res)
    return EstimatorOutput.build(
        psi, _if_se(phi, w), tau, name,
        if_mean=float(np.dot(w, phi) / w.sum()),
        if_scale=float(np.sqrt(np.dot(w, phi * phi) / w.sum())),
        denominator=denom,
        **diagnostics,
    )


def binary_weighted_estimand(q1, q0, pi, weights=None):
    """``sum w pi(1 - pi)(q1 - q0) / sum w pi(1 - pi)``."""
    q1 = np.asarray(q1, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    pi = np.asarray(pi, dtype=float)
    w = np.ones(pi.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    k = w * pi * (1.0 - pi)
    total = k.sum()
    if not total > 0:
        raise DegeneratePropensity("all propensity weights pi(1 - pi) are zero")
    return float(np.dot(k, q1 - q0) / total)


# ---------------------------------------------------------------------------
# nuisance learning


@dataclass(frozen=True, eq=False)
class FoldModels:
    """Learners trained on the complement of one fold."""

    fold: int
    train: np.ndarray
    test: np.ndarray
    forest: object
    m_model: object
    m_train: np.ndarray


@dataclass(frozen=True, eq=False)
class NuisanceModels:
    """tau-free fitted learners for every fold of a plan."""

    plan: object
    folds: tuple
    seed: int


def _forest_params(config):
    return ForestParams(config.num_trees, config.min_leaf, config.mtry, config.subsample)


def _mean_params(config):
    return ForestParams(config.mean_trees, config.min_leaf, None, config.subsample)


def fit_nuisance_models(dataset, config, plan):
    """Fit the quantile forest for Q(Y | A, L) and the model for E(A | L) per fold."""
    features = dataset.features
    family = "binary" if dataset.is_binary else "continuous"
    out = []
    for fold, train, test in plan.splits():
        forest = fit_quantile_forest(features[train], dataset.y[train], _forest_params(config),
                                     derive_seed(config.seed, fold, _STREAM_FOREST))
        m_model = fit_mean_learner(dataset.l[train], dataset.a[train], family, dataset.weights[train],
                                   derive_seed(config.seed, fold, _STREAM_M), config.mean_learner,
                                   _mean_params(config))
        out.append(FoldModels(fold, train, test, forest, m_model, m_model.training_predict(dataset.l[train])))
    return NuisanceModels(plan, tuple(out), int(config.seed))


def _fold_density(dataset, train, q_train, config):
    return residual_density_at_quantile(
        dataset.y[train] - q_train, dataset.weights[train], outcome=dataset.y[train],
        floor_factor=config.density_floor_factor,
    )


def nuisances_for_tau(models, dataset, tau, config, link=IDENTITY, need_h=False):
    """Evaluate the fold learners at quantile level ``tau``.

    Held-out rows get predictions from learners trained without them (with
    ``k = 1`` training and evaluation rows coincide). The residual density of
    each fold is estimated from the training rows' out-of-bag residuals.
    ``need_h`` additionally regresses the clever covariate on ``L``.
    """
    n = dataset.n
    features = dataset.features
    m = np.empty(n)
    q = np.empty(n)
    v = np.empty(n)
    d = np.empty(n)
    fold_of = np.empty(n, dtype=np.int64)
    binary = dataset.is_binary
    q1 = np.empty(n) if binary else None
    q0 = np.empty(n) if binary else None
    v_log = np.empty(n) if link.kind is Link.LOG else None
    h = np.empty(n) if need_h else None
    densities = []
    for fm in models.folds:
        train, test = fm.train, fm.test
        fold_of[test] = fm.fold
        q[test] = fm.forest.predict(features[test], [tau])[:, 0]
        q_oob = fm.forest.predict(features[train], [tau], oob=True)[:, 0]
        dens = _fold_density(dataset, train, q_oob, config)
        densities.append(dens)
        d[test] = dens.value_at_zero
        m[test] = fm.m_model.predict(dataset.l[test])
        if binary:
            ft = features[test].copy()
            ft[:, 0] = 1.0
            q1[test] = fm.forest.predict(ft, [tau])[:, 0]
            ft[:, 0] = 0.0
            q0[test] = fm.forest.predict(ft, [tau])[:, 0]
            v[test] = q1[test] * m[test] + q0[test] * (1.0 - m[test])
            if v_log is not None:
                v_log[test] = link.g(q1[test]) * m[test] + link.g(q0[test]) * (1.0 - m[test])
        else:
            v_model = fit_mean_learner(dataset.l[train], q_oob, "continuous", dataset.weights[train],
                                       derive_seed(models.seed, fm.fold, _STREAM_V), config.mean_learner,
                                       _mean_params(config))
            v[test] = v_model.predict(dataset.l[test])
            if v_log is not None:
                vl_model = fit_mean_learner(dataset.l[train], link.g(q_oob), "continuous", dataset.weights[train],
                                            derive_seed(models.seed, fm.fold, _STREAM_VLOG), config.mean_learner,
                                            _mean_params(config))
                v_log[test] = vl_model.predict(dataset.l[test])
        if need_h:
            h[test] = _fit_h(dataset, fm.fold, train, test, fm.m_train, dens.value_at_zero, models.seed, config)
    if link.kind is Link.LOG:
        link.g(q)  # validates positivity
    return NuisanceFits(
        m=m, q=q, v=v, d=d, fold_of=fold_of, tau=float(tau), q1=q1, q0=q0, v_log=v_log, h=h,
        info={"densities": densities, "k": models.plan.k, "stratified": models.plan.stratified,
              "fold_seed": models.plan.seed, "m_kinds": [fm.m_model.kind.value for fm in models.folds]},
    )


def _fit_h(dataset, fold, train, test, m_train, d_fold, seed, config):
    """Cross-fitted E[w | L] for the clever covariate w = (a - m) / d."""
    w_train = (dataset.a[train] - m_train) / d_fold
    model = fit_mean_learner(dataset.l[train], w_train, "continuous", dataset.weights[train],
                             derive_seed(seed, fold, _STREAM_H), config.mean_learner, _mean_params(config))
    return model.predict(dataset.l[test])


def fold_plan_for(dataset, config):
    return make_folds(dataset, config.folds, derive_seed(config.seed, 0x666F6C64))


def estimate_nuisances(dataset, tau, config, fold_plan=None, link=None, need_h=False):
    """Fit and evaluate all nuisances for one ``tau`` (forest-based learners)."""
    plan = fold_plan if fold_plan is not None else fold_plan_for(dataset, config)
    link = make_link(config.link) if link is None else link
    models = fit_nuisance_models(dataset, config, plan)
    return nuisances_for_tau(models, dataset, tau, config, link=link, need_h=need_h)


def vs_nuisances(dataset, tau, config, fold_plan=None):
    """Nuisances from backward-stepwise linear quantile regression.

    Per fold, the selected model gives ``q`` and the exposure coefficient
    ``beta``; under that model ``E[Q | L] = q - beta (a - m)``, which is used
    for ``v``. ``d`` comes from the fold's in-sample QR residuals (rows the
    fit interpolates excluded, see
    :func:`~alqr.learners.density.qr_residual_density`) and ``h``
    regresses the clever covariate on ``L``.
    """
    plan = fold_plan if fold_plan is not None else fold_plan_for(dataset, config)
    family = "binary" if dataset.is_binary else "continuous"
    n = dataset.n
    m = np.empty(n)
    q = np.empty(n)
    d = np.empty(n)
    h = np.empty(n)
    beta = np.empty(n)
    fold_of = np.empty(n, dtype=np.int64)
    selections = []
    densities = []
    for fold, train, test in plan.splits():
        fold_of[test] = fold
        fit = stepwise_qr_aic(dataset, tau, forced_exposure=True, rows=train)
        selections.append(list(fit.selected))
        q_train = stepwise_design(dataset.a[train], dataset.l[train], fit.selected) @ fit.coefficients
        q[test] = stepwise_design(dataset.a[test], dataset.l[test], fit.selected) @ fit.coefficients
        beta[test] = fit.exposure_coef
        dens = qr_residual_density(dataset.y[train] - q_train, dataset.weights[train], outcome=dataset.y[train],
                                   floor_factor=config.density_floor_factor)
        densities.append(dens)
        d[test] = dens.value_at_zero
        m_model = fit_mean_learner(dataset.l[train], dataset.a[train], family, dataset.weights[train],
                                   derive_seed(config.seed, fold, _STREAM_M), config.mean_learner,
                                   _mean_params(config))
        m[test] = m_model.predict(dataset.l[test])
        m_train = m_model.training_predict(dataset.l[train])
        h[test] = _fit_h(dataset, fold, train, test, m_train, dens.value_at_zero, config.seed, config)
    v = q - beta * (dataset.a - m)
    return NuisanceFits(
        m=m, q=q, v=v, d=d, fold_of=fold_of, tau=float(tau), h=h, beta=beta,
        info={"densities": densities, "k": plan.k, "stratified": plan.stratified, "fold_seed": plan.seed,
              "selected": selections},
    )


# ---------------------------------------------------------------------------
# population value from known truth


def estimand_population_value(truth, tau, n_draws, seed):
    """Monte Carlo value of the estimand in two equivalent forms.

    ``truth`` supplies ``sample_l(rng, N)``, ``sample_a(rng, L)``,
    ``m(L)``, ``quantile(a, L, tau)`` and ``binary``; a continuous exposure
    also needs ``a_law(L) -> (mean, sd)`` of the normal law of ``A | L``.

    Form (2) pairs each draw with an independent ``A* ~ A | L``:
    ``E[(A - A*)(Q(A) - Q(A*))] / E[(A - A*)^2]``. Form (3) is
    ``E[(A - m)(Q(A) - v)] / E[(A - m)^2]`` with ``v = E[Q(A) | L]`` computed
    exactly (binary) or by 40-point Gauss-Hermite quadrature (normal ``A``).

    Returns a dict with both values, their delta-method Monte Carlo standard
    errors, and the difference with its standard error (from the paired
    per-draw influence values).
    """
    rng = make_rng(seed)
    L = truth.sample_l(rng, n_draws)
    A = truth.sample_a(rng, L)
    A_star = truth.sample_a(rng, L)
    Q = truth.quantile(A, L, tau)
    Q_star = truth.quantile(A_star, L, tau)
    m = truth.m(L)
    if truth.binary:
        v = truth.quantile(np.ones(n_draws), L, tau) * m + truth.quantile(np.zeros(n_draws), L, tau) * (1.0 - m)
    else:
        mu, sd = truth.a_law(L)
        nodes, wts = np.polynomial.hermite_e.hermegauss(40)
        wts = wts / wts.sum()
        v = np.zeros(n_draws)
        for z, wt in zip(nodes, wts):
            v += wt * truth.quantile(mu + sd * z, L, tau)

    def ratio(num, den):
        psi = num.mean() / den.mean()
        infl = (num - psi * den) / den.mean()
        return float(psi), infl

    psi2, if2 = ratio((A - A_star) * (Q - Q_star), (A - A_star) ** 2)
    psi3, if3 = ratio((A - m) * (Q - v), (A - m) ** 2)
    root = math.sqrt(n_draws)
    return {
        "form2": psi2,
        "form3": psi3,
        "se2": float(if2.std(ddof=1) / root),
        "se3": float(if3.std(ddof=1) / root),
        "difference": abs(psi2 - psi3),
        "se_difference": float((if2 - if3).std(ddof=1) / root),
    }
