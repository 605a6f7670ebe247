"""Simulation experiments: data-generating processes, truths, reference
estimators and the Monte Carlo driver.

Experiments
-----------
exp1a  binary A, Y = 1 + A + f(L) + e, e ~ Gamma(1, 2)
exp1b  as exp1a with e ~ Gamma(1, 2 + A) (heteroscedastic)
exp1c  continuous A ~ N(-0.5 + L1 - 2 L2 - 2 L3 + L4, 2^2), e ~ Gamma(1, 4)
exp2   binary A, logit propensity of exp1 plus
       -0.5 L1^2 + 0.5 L2^2 - 0.5 L3 L4, e ~ Gamma(1, 3)
exp3   A ~ Bernoulli(0.5) independent of L, e ~ Gamma(1, 2)
exp4   50 AR(0.5) covariates, A ~ N(sum_{k<=10} L_k / k, 1),
       Y = A + sum_{k<=5} L_k / k + sum_{k=11..15} L_k / (k - 10) + N(0, 2^2)

with ``f(L) = sin L1 + L2^2 + L3 + L4 + L3 L4`` and Gamma(shape, scale).

Replication ``r`` of a run with master seed ``s`` draws its data from
``derive_seed(s, r)`` and its fold/learner seeds from
``derive_seed(s, r, 1)``, so results do not depend on which replications
ran before or on how they were distributed over worker processes.
"""

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import multiprocessing as mp
import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from ._rng import derive_seed, make_rng
from .core import Estimator, EstimatorConfig, EstimatorOutput, TmleMode, validate_dataset
from .engine import (
    dml_estimate,
    fit_nuisance_models,
    fold_plan_for,
    nuisances_for_tau,
    plugin_output,
    vs_nuisances,
)
from .exceptions import AlqrError, AllReplicationsFailed, NotBinary, UnknownExperiment
from .learners.density import qr_residual_density
from .learners.qr import fit_parametric_qr, stepwise_design, stepwise_qr_aic
from .targeting import dml_vs, tmle_binary, tmle_continuous_onestep, tmle_vs


class ExperimentId(str, enum.Enum):
    EXP1_HOMOSCEDASTIC = "exp1a"
    EXP1_HETEROSCEDASTIC = "exp1b"
    EXP1_CONTINUOUS = "exp1c"
    EXP2_EXTREME_PROP = "exp2"
    EXP3_RANDOMIZED = "exp3"
    EXP4_HIGH_DIM = "exp4"


_ALIASES = {
    "exp1homoscedastic": "exp1a",
    "exp1heteroscedastic": "exp1b",
    "exp1continuous": "exp1c",
    "exp2extremeprop": "exp2",
    "exp3randomized": "exp3",
    "exp4highdim": "exp4",
}


def experiment_id(value):
    if isinstance(value, ExperimentId):
        return value
    key = str(value).lower().replace("_", "").replace("-", "")
    key = _ALIASES.get(key, key)
    try:
        return ExperimentId(key)
    except ValueError:
        choices = ", ".join(e.value for e in ExperimentId)
        raise UnknownExperiment(f"unknown experiment {value!r}; expected one of {choices}") from None


EXP1_COV = np.array([
    [1.0, 0.5, 0.2, 0.3],
    [0.5, 1.0, 0.7, 0.0],
    [0.2, 0.7, 1.0, 0.0],
    [0.3, 0.0, 0.0, 1.0],
])
EXP4_DIM = 50
EXP4_RHO = 0.5


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class DgpSpec:
    """An experiment and its sample size."""

    id: ExperimentId
    n: int = 500

    def __post_init__(self):
        object.__setattr__(self, "id", experiment_id(self.id))
        if int(self.n) < 2:
            raise ValueError("n must be >= 2")

    @property
    def binary(self):
        return self.id not in (ExperimentId.EXP1_CONTINUOUS, ExperimentId.EXP4_HIGH_DIM)

    @property
    def truth(self):
        return Truth(self.id)


class Truth:
    """True laws of an experiment: covariates, exposure and conditional quantiles."""

    def __init__(self, exp_id):
        self.id = experiment_id(exp_id)
        if self.id is ExperimentId.EXP4_HIGH_DIM:
            idx = np.arange(EXP4_DIM)
            cov = EXP4_RHO ** np.abs(idx[:, None] - idx[None, :])
        else:
            cov = EXP1_COV
        self.cov = cov
        self._chol = np.linalg.cholesky(cov)

    @property
    def binary(self):
        return self.id not in (ExperimentId.EXP1_CONTINUOUS, ExperimentId.EXP4_HIGH_DIM)

    @property
    def dim(self):
        return self.cov.shape[0]

    def sample_l(self, rng, n):
        return rng.standard_normal((n, self.dim)) @ self._chol.T

    def propensity(self, L):
        L1, L2, L3, L4 = L[:, 0], L[:, 1], L[:, 2], L[:, 3]
        lin = -0.5 + 0.2 * L1 - 0.4 * L2 - 0.4 * L3 + 0.2 * L4
        if self.id is ExperimentId.EXP2_EXTREME_PROP:
            return _expit(lin - 0.5 * L1**2 + 0.5 * L2**2 - 0.5 * L3 * L4)
        if self.id is ExperimentId.EXP3_RANDOMIZED:
            return np.full(L.shape[0], 0.5)
        return _expit(lin)

    def a_law(self, L):
        """Mean and standard deviation of the normal law of A | L."""
        if self.id is ExperimentId.EXP1_CONTINUOUS:
            return -0.5 + L[:, 0] - 2.0 * L[:, 1] - 2.0 * L[:, 2] + L[:, 3], 2.0
        if self.id is ExperimentId.EXP4_HIGH_DIM:
            return L[:, :10] @ (1.0 / np.arange(1, 11)), 1.0
        raise NotBinary("exposure is binary; there is no normal law")

    def m(self, L):
        return self.propensity(L) if self.binary else self.a_law(L)[0]

    def sample_a(self, rng, L):
        if self.binary:
            return (rng.random(L.shape[0]) < self.propensity(L)).astype(float)
        mu, sd = self.a_law(L)
        return mu + sd * rng.standard_normal(L.shape[0])

    def base(self, L):
        """Outcome mean part not involving A or the error."""
        if self.id is ExperimentId.EXP4_HIGH_DIM:
            return L[:, :5] @ (1.0 / np.arange(1, 6)) + L[:, 10:15] @ (1.0 / np.arange(1, 6))
        L1, L2, L3, L4 = L[:, 0], L[:, 1], L[:, 2], L[:, 3]
        return 1.0 + np.sin(L1) + L2**2 + L3 + L4 + L3 * L4

    def error_scale(self, a):
        if self.id is ExperimentId.EXP1_HETEROSCEDASTIC:
            return 2.0 + a
        return {
            ExperimentId.EXP1_HOMOSCEDASTIC: 2.0,
            ExperimentId.EXP1_CONTINUOUS: 4.0,
            ExperimentId.EXP2_EXTREME_PROP: 3.0,
            ExperimentId.EXP3_RANDOMIZED: 2.0,
            ExperimentId.EXP4_HIGH_DIM: 2.0,
        }[self.id] * np.ones_like(a)

    def sample_error(self, rng, a):
        scale = self.error_scale(a)
        if self.id is ExperimentId.EXP4_HIGH_DIM:
            return scale * rng.standard_normal(a.shape[0])
        return scale * rng.standard_exponential(a.shape[0])  # Gamma(1, scale)

    def error_quantile(self, a, tau):
        scale = self.error_scale(np.asarray(a, dtype=float))
        if self.id is ExperimentId.EXP4_HIGH_DIM:
            return scale * stats.norm.ppf(tau)
        return -scale * math.log(1.0 - tau)

    def quantile(self, a, L, tau):
        a = np.asarray(a, dtype=float)
        return self.base(L) + a + self.error_quantile(a, tau)


def gen_experiment(spec, seed):
    """Draw one data set of size ``spec.n``; returns ``(Dataset, Truth)``."""
    truth = spec.truth
    rng = make_rng(seed)
    L = truth.sample_l(rng, spec.n)
    a = truth.sample_a(rng, L)
    y = truth.base(L) + a + truth.sample_error(rng, a)
    ds = validate_dataset(y, a, L, "binary" if truth.binary else "continuous")
    return ds, truth


def true_psi(spec, tau):
    """Analytic estimand: 1 for location-shift designs, ``1 - ln(1 - tau)``
    for the heteroscedastic design (the error quantile grows by ``-ln(1 - tau)``
    per unit of A)."""
    exp_id = spec.id if isinstance(spec, DgpSpec) else experiment_id(spec)
    if exp_id is ExperimentId.EXP1_HETEROSCEDASTIC:
        return 1.0 - math.log(1.0 - tau)
    return 1.0


# ---------------------------------------------------------------------------
# parametric reference estimators


def oracle_design(spec, a, L):
    """Correctly specified quantile-regression basis (intercept, A, then covariate terms)."""
    exp_id = spec.id if isinstance(spec, DgpSpec) else experiment_id(spec)
    if exp_id is ExperimentId.EXP4_HIGH_DIM:
        return np.column_stack([np.ones(a.shape[0]), a, L[:, :5], L[:, 10:15]])
    L1, L2, L3, L4 = L[:, 0], L[:, 1], L[:, 2], L[:, 3]
    return np.column_stack([np.ones(a.shape[0]), a, np.sin(L1), L2**2, L3, L4, L3 * L4])


def qr_sandwich_se(design, y, coef, tau, weights, exposure_index=1, floor_factor=1e-3):
    """Standard error of one coefficient under the iid quantile-regression
    asymptotics: ``tau(1 - tau) / f0^2 * (X'WX)^-1 X'W^2X (X'WX)^-1`` with
    ``f0`` the kernel residual density at zero (interpolated rows excluded)."""
    resid = y - design @ coef
    f0 = qr_residual_density(resid, weights, outcome=y, floor_factor=floor_factor).value_at_zero
    w = weights / weights.sum()
    bread = np.linalg.inv(design.T @ (design * w[:, None]))
    meat = design.T @ (design * (w * w)[:, None])
    cov = tau * (1.0 - tau) / f0**2 * bread @ meat @ bread
    return float(math.sqrt(max(cov[exposure_index, exposure_index], 0.0))), f0


def _qr_output(design, dataset, tau, name, **diagnostics):
    fit = fit_parametric_qr(design, dataset.y, tau, weights=dataset.weights, exposure_index=1)
    se, f0 = qr_sandwich_se(design, dataset.y, fit.coefficients, tau, dataset.weights)
    return EstimatorOutput.build(fit.exposure_coef, se, tau, name, density=f0, **diagnostics)


def oracle_estimate(dataset, spec, tau):
    """Quantile regression on the correctly specified basis."""
    return _qr_output(oracle_design(spec, dataset.a, dataset.l), dataset, tau, "oracle")


def naive_qr_estimate(dataset, tau):
    """Quantile regression on intercept, A and the covariate main effects."""
    design = np.column_stack([np.ones(dataset.n), dataset.a, dataset.l])
    return _qr_output(design, dataset, tau, "qr")


def qr_vs_estimate(dataset, tau):
    """Quantile regression after backward AIC selection, with naive
    (selection-ignoring) sandwich standard errors."""
    fit = stepwise_qr_aic(dataset, tau, forced_exposure=True)
    design = stepwise_design(dataset.a, dataset.l, fit.selected)
    se, f0 = qr_sandwich_se(design, dataset.y, fit.coefficients, tau, dataset.weights)
    return EstimatorOutput.build(fit.exposure_coef, se, tau, "qr-vs", density=f0, selected=list(fit.selected))


# ---------------------------------------------------------------------------
# Monte Carlo


MC_ESTIMATORS = (
    "oracle", "qr", "qr-vs", "plugin", "dml", "dml-cf", "tmle", "tmle-cf", "tmle1", "tmle1-cf",
    "dml-vs", "dml-vs-cf", "tmle-vs", "tmle-vs-cf",
)


@dataclass(frozen=True)
class McSettings:
    """Learner settings used in every replication.

    The plug-in estimator always uses ``k = 1`` (no cross-fitting); names
    ending in ``-cf`` use ``folds``. ``tmle1`` is the one-step variant of
    the binary-exposure TMLE. ``vs_mean_learner`` is the mean learner of the
    variable-selection estimators.
    """

    folds: int = 5
    num_trees: int = 200
    min_leaf: int = 5
    mean_learner: str = "auto"
    mean_trees: int = 100
    vs_mean_learner: str = "linear"
    max_targeting_iter: int = 50


def estimator_name(est):
    """Display name of a Monte Carlo estimator: the name itself, or a
    callable's ``name`` attribute / ``__name__``."""
    if callable(est):
        return str(getattr(est, "name", est.__name__))
    return str(est).lower()


def _parse_estimator(name):
    name = name.lower()
    if name not in MC_ESTIMATORS:
        raise UnknownExperiment(f"unknown simulation estimator {name!r}; expected one of {', '.join(MC_ESTIMATORS)}")
    cf = name.endswith("-cf")
    return name[:-3] if cf else name, cf


def _config(settings, tau, estimator, folds, seed, tmle_mode=TmleMode.ITERATE, mean_learner=None):
    return EstimatorConfig(
        tau=tau, estimator=estimator, folds=folds, seed=seed, tmle_mode=tmle_mode,
        num_trees=settings.num_trees, min_leaf=settings.min_leaf,
        mean_learner=mean_learner or settings.mean_learner, mean_trees=settings.mean_trees,
        max_targeting_iter=settings.max_targeting_iter,
    )


def run_replication(spec, estimators, taus, r, master_seed, settings=McSettings()):
    """One replication: returns a list of per-(estimator, tau) records.

    ``estimators`` holds built-in names (see ``MC_ESTIMATORS``) or callables
    ``f(dataset, spec, tau, seed) -> EstimatorOutput``.
    """
    data_seed = derive_seed(master_seed, r)
    fit_seed = derive_seed(master_seed, r, 1)
    with threadpool_limits(limits=1):
        dataset, _ = gen_experiment(spec, data_seed)
        models = {}
        nuis = {}
        vs_nuis = {}
        records = []
        for est in estimators:
            name = estimator_name(est)
            if not callable(est):
                base, cf = _parse_estimator(name)
                folds = settings.folds if cf else 1
            for tau in taus:
                truth = true_psi(spec, tau)
                try:
                    if callable(est):
                        out = est(dataset, spec, tau, fit_seed)
                    else:
                        out = _run_one(base, folds, tau, dataset, spec, settings, fit_seed, models, nuis, vs_nuis)
                    records.append({
                        "estimator": name, "tau": float(tau), "r": int(r), "ok": True,
                        "psi_hat": out.psi_hat, "se": out.se, "covers": bool(out.covers(truth)),
                        "targeting_residual": float(out.diagnostics.get("targeting_residual", 0.0)),
                        "if_mean": float(out.diagnostics.get("if_mean", 0.0)),
                        "if_scale": float(out.diagnostics.get("if_scale", 0.0)),
                    })
                except AlqrError as exc:
                    records.append({"estimator": name, "tau": float(tau), "r": int(r), "ok": False,
                                    "error": f"{type(exc).__name__}: {exc}"})
    return records


def _run_one(base, folds, tau, dataset, spec, settings, seed, models, nuis, vs_nuis):
    if base == "oracle":
        return oracle_estimate(dataset, spec, tau)
    if base == "qr":
        return naive_qr_estimate(dataset, tau)
    if base == "qr-vs":
        return qr_vs_estimate(dataset, tau)
    if base in ("dml-vs", "tmle-vs"):
        config = _config(settings, tau, base, folds, seed, mean_learner=settings.vs_mean_learner)
        key = (folds, tau)
        if key not in vs_nuis:
            vs_nuis[key] = vs_nuisances(dataset, tau, config, fold_plan_for(dataset, config))
        fn = tmle_vs if base == "tmle-vs" else dml_vs
        return fn(dataset, tau, config, nuisances=vs_nuis[key])
    mode = TmleMode.ONE_STEP if base == "tmle1" else TmleMode.ITERATE
    est = {"plugin": Estimator.PLUGIN, "dml": Estimator.DML, "tmle": Estimator.TMLE, "tmle1": Estimator.TMLE}[base]
    config = _config(settings, tau, est, folds, seed, mode)
    if folds not in models:
        models[folds] = fit_nuisance_models(dataset, config, fold_plan_for(dataset, config))
    need_h = est is Estimator.TMLE and not dataset.is_binary
    key = (folds, tau, need_h)
    if key not in nuis:
        nuis[key] = nuisances_for_tau(models[folds], dataset, tau, config, need_h=need_h)
    n_f = nuis[key]
    if est is Estimator.PLUGIN:
        return plugin_output(n_f, dataset, tau)
    if est is Estimator.DML:
        return dml_estimate(n_f, dataset, tau)
    if dataset.is_binary:
        return tmle_binary(dataset, n_f, tau, config)
    return tmle_continuous_onestep(dataset, n_f, tau, config)


@dataclass(frozen=True)
class McRow:
    estimator: str
    tau: float
    truth: float
    bias: float
    mc_sd: float
    mean_se: float
    coverage_95: float
    n_reps: int
    n_failures: int
    mean_abs_targeting: float
    median_abs_targeting: float
    max_abs_if_mean_ratio: float
    degenerate_moments: bool


@dataclass(frozen=True)
class McSummary:
    """Per-(estimator, tau) Monte Carlo metrics plus the raw records."""

    experiment: str
    n: int
    reps: int
    master_seed: int
    rows: tuple
    records: tuple = field(repr=False)

    def row(self, estimator, tau):
        for r in self.rows:
            if r.estimator == estimator and r.tau == float(tau):
                return r
        raise KeyError((estimator, tau))

    def to_dict(self, include_records=False):
        out = {"experiment": self.experiment, "n": self.n, "reps": self.reps, "master_seed": self.master_seed,
               "rows": [asdict(r) for r in self.rows]}
        if include_records:
            out["records"] = list(self.records)
        return out

    def __eq__(self, other):
        if not isinstance(other, McSummary):
            return NotImplemented
        return self.to_dict(True) == other.to_dict(True)

    __hash__ = None


def summarize(spec, names, taus, reps, master_seed, records):
    rows = []
    for name in names:
        for tau in taus:
            recs = [x for x in records if x["estimator"] == name and x["tau"] == float(tau)]
            ok = [x for x in recs if x["ok"]]
            truth = true_psi(spec, tau)
            n_ok = len(ok)
            if n_ok:
                psi = np.array([x["psi_hat"] for x in ok])
                se = np.array([x["se"] for x in ok])
                cov = np.array([x["covers"] for x in ok], dtype=float)
                targ = np.abs(np.array([x["targeting_residual"] for x in ok]))
                ratio = np.array([abs(x["if_mean"]) / x["if_scale"] if x["if_scale"] > 0 else 0.0 for x in ok])
                rows.append(McRow(name, float(tau), truth, float(psi.mean() - truth),
                                  float(psi.std(ddof=1)) if n_ok > 1 else 0.0, float(se.mean()), float(cov.mean()),
                                  n_ok, len(recs) - n_ok, float(targ.mean()), float(np.median(targ)),
                                  float(ratio.max()), n_ok < 2))
            else:
                nan = float("nan")
                rows.append(McRow(name, float(tau), truth, nan, nan, nan, nan, 0, len(recs), nan, nan, nan, True))
    return McSummary(spec.id.value, int(spec.n), int(reps), int(master_seed), tuple(rows), tuple(records))


def _worker(args):
    spec, estimators, taus, rs, master_seed, settings = args
    out = []
    for r in rs:
        out.extend(run_replication(spec, estimators, taus, r, master_seed, settings))
    return out


def run_monte_carlo(spec, estimators, taus, reps, master_seed, workers=1, settings=McSettings()):
    """Run ``reps`` replications and summarize them.

    ``workers`` is the number of worker processes. Records are sorted by replication before aggregation,
    so the summary is identical for any worker count.

    Raises
    ------
    AllReplicationsFailed
        When every estimator failed in every replication.
    """
    if int(reps) < 1:
        raise ValueError("reps must be >= 1")
    estimators = [e if callable(e) else str(e).lower() for e in estimators]
    for e in estimators:
        if not callable(e):
            _parse_estimator(e)
    names = [estimator_name(e) for e in estimators]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate estimator names: {names}")
    taus = [float(t) for t in taus]
    workers = max(1, min(int(workers or 1), int(reps)))
    if workers == 1:
        records = _worker((spec, estimators, taus, range(reps), master_seed, settings))
    else:
        chunks = [list(range(i, reps, workers)) for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as pool:
            parts = list(pool.map(_worker, [(spec, estimators, taus, c, master_seed, settings) for c in chunks]))
        records = [x for part in parts for x in part]
    order = {name: i for i, name in enumerate(names)}
    records.sort(key=lambda x: (x["r"], order[x["estimator"]], x["tau"]))
    if not any(x["ok"] for x in records):
        raise AllReplicationsFailed(f"all {reps} replications failed; first error: {records[0].get('error')}")
    return summarize(spec, names, taus, reps, master_seed, records)


def propensity_diagnostics(spec, n_draws=100_000, seed=0, bins=20):
    """Histogram of the true propensity score over ``n_draws`` covariate draws.

    Returns ``{"edges": bins + 1 edges on [0, 1], "counts": bins counts}``.

    Raises
    ------
    NotBinary
        For experiments with a continuous exposure.
    """
    truth = spec.truth if isinstance(spec, DgpSpec) else Truth(spec)
    if not truth.binary:
        raise NotBinary(f"experiment {truth.id.value} has a continuous exposure")
    rng = make_rng(seed)
    pi = truth.propensity(truth.sample_l(rng, n_draws))
    counts, edges = np.histogram(pi, bins=bins, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}
