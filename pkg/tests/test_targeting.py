import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alqr import EstimatorConfig, validate_dataset
from alqr.engine import NuisanceFits, dml_estimate, estimate_nuisances, fold_plan_for, vs_nuisances
from alqr.exceptions import AllZeroCleverCovariates
from alqr.targeting import (
    clever_covariate,
    dml_vs,
    solve_epsilon,
    targeting_sum,
    tmle_binary,
    tmle_continuous_onestep,
    tmle_vs,
)

from conftest import linear_dataset


def brute_min(y, q, w, tau, omega, n_grid=100_001):
    """Minimal |S| over a dense grid spanning all breakpoints, plus the
    breakpoints themselves and points beyond them."""
    active = w != 0
    bp = (y[active] - q[active]) / w[active]
    lo, hi = bp.min(), bp.max()
    span = max(hi - lo, 1.0)
    grid = np.concatenate([np.linspace(lo - span, hi + span, n_grid), bp])
    best = np.inf
    # vectorized over the grid in chunks
    for chunk in np.array_split(grid, 20):
        ind = (y[None, :] <= q[None, :] + chunk[:, None] * w[None, :]).astype(float)
        s = np.abs((omega * w * (tau - ind)).sum(axis=1) / omega.sum())
        best = min(best, s.min())
    return best


def test_clever_covariate():
    assert clever_covariate(1.0, 0.5, 0.5) == 1.0
    assert clever_covariate(0.3, 0.3, 2.0) == 0.0
    assert clever_covariate(1.0, 0.0, 1e-3) == pytest.approx(1e3)


def test_targeting_sum_examples():
    y, q, w = np.array([5.0, 6.0]), np.array([0.0, 0.0]), np.array([2.0, 4.0])
    assert targeting_sum(y, q, w, 0.3) == pytest.approx(0.3 * 3.0)
    assert targeting_sum(y, q, np.zeros(2), 0.3) == 0.0
    assert targeting_sum([0.0, 2.0], [0.0, 0.0], [1.0, 1.0], 0.5) == 0.0


def test_solve_epsilon_examples():
    assert solve_epsilon([0.0, 2.0], [0.0, 0.0], [1.0, 1.0], 0.5) == 0.0
    assert solve_epsilon([2.0], [0.0], [1.0], 0.5) == 0.0
    with pytest.raises(AllZeroCleverCovariates):
        solve_epsilon([1.0, 2.0], [0.0, 0.0], [0.0, 0.0], 0.5)


@given(seed=st.integers(0, 100_000), n=st.integers(1, 20), tau=st.floats(0.05, 0.95),
       weighted=st.booleans(), ties=st.booleans())
@settings(max_examples=100, deadline=None)
def test_solve_epsilon_global_min(seed, n, tau, weighted, ties):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    q = rng.normal(size=n)
    w = rng.normal(size=n)
    if ties:
        y = np.round(y, 1)
        q = np.round(q, 1)
        w = np.round(w, 0)
    if not np.any(w != 0):
        w[0] = 1.0
    omega = rng.uniform(0.5, 2, size=n) if weighted else np.ones(n)
    eps = solve_epsilon(y, q, w, tau, omega)
    attained = abs(targeting_sum(y, q + eps * w, w, tau, omega))
    assert attained <= brute_min(y, q, w, tau, omega, 2001) + 1e-12


def _nuis_binary(n=40, seed=0):
    rng = np.random.default_rng(seed)
    a = (np.arange(n) % 2).astype(float)
    y = a + rng.normal(size=n)
    ds = validate_dataset(y, a, rng.normal(size=(n, 1)), "binary")
    m = np.full(n, 0.5)
    q1 = np.full(n, 1.5)
    q0 = np.full(n, 0.3)
    q = np.where(a == 1, q1, q0)
    nuis = NuisanceFits(m=m, q=q, v=q1 * m + q0 * (1 - m), d=np.full(n, 0.4),
                        fold_of=np.ones(n, dtype=np.int64), tau=0.5, q1=q1, q0=q0)
    return ds, nuis


def test_tmle_binary_traces():
    ds, nuis = _nuis_binary()
    out = tmle_binary(ds, nuis, 0.5, EstimatorConfig())
    s = out.diagnostics["s_trace"]
    assert all(b < a for a, b in zip(s, s[1:]))
    assert len(out.diagnostics["epsilon_trace"]) == out.diagnostics["n_iterations"] == len(s) - 1
    assert abs(out.diagnostics["targeting_residual"]) == pytest.approx(s[-1])
    assert abs(out.diagnostics["if_mean"]) <= 1e-10 * out.diagnostics["if_scale"]


def test_tmle_binary_noop_when_solved():
    ds, nuis = _nuis_binary()
    # choose q so that S = 0: half of each exposure group below q
    q1 = np.full(ds.n, np.median(ds.y[ds.a == 1]))
    q0 = np.full(ds.n, np.median(ds.y[ds.a == 0]))
    q = np.where(ds.a == 1, q1, q0)
    nuis = nuis.with_(q=q, q1=q1, q0=q0, v=0.5 * q1 + 0.5 * q0)
    w = clever_covariate(ds.a, nuis.m, nuis.d)
    assert targeting_sum(ds.y, q, w, 0.5) == 0.0
    out = tmle_binary(ds, nuis, 0.5, EstimatorConfig())
    assert out.diagnostics["n_iterations"] == 0
    assert out.psi_hat == dml_estimate(nuis, ds, 0.5).psi_hat
    one = tmle_binary(ds, nuis, 0.5, EstimatorConfig(tmle_mode="onestep"))
    assert one.psi_hat == out.psi_hat


def test_tmle_binary_on_fitted_nuisances(bin_data):
    cfg = EstimatorConfig(num_trees=30, mean_learner="linear", folds=2, seed=1)
    nuis = estimate_nuisances(bin_data, 0.5, cfg, fold_plan_for(bin_data, cfg))
    out = tmle_binary(bin_data, nuis, 0.5, cfg)
    d = out.diagnostics
    assert d["converged"] == (abs(d["targeting_residual"]) <= d["targeting_tol"])
    assert abs(d["targeting_residual"]) <= d["s_trace"][0]
    one = tmle_binary(bin_data, nuis, 0.5, cfg.with_(tmle_mode="onestep"))
    assert one.diagnostics["n_iterations"] <= 1


def _cont_nuis(n=50, seed=0, h=None):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    y = a + rng.normal(size=n)
    ds = validate_dataset(y, a, rng.normal(size=(n, 1)))
    m = np.zeros(n)
    q = 0.8 * a - 1.0
    nuis = NuisanceFits(m=m, q=q, v=np.full(n, 0.5), d=np.full(n, 0.4),
                        fold_of=np.ones(n, dtype=np.int64), tau=0.5,
                        h=np.zeros(n) if h is None else h)
    return ds, nuis


def test_onestep_epsilon_zero_equals_dml():
    ds, nuis = _cont_nuis()
    w = clever_covariate(ds.a, nuis.m, nuis.d)
    q = nuis.q + solve_epsilon(ds.y, nuis.q, w, 0.5) * w
    solved = nuis.with_(q=q)
    assert solve_epsilon(ds.y, q, w, 0.5) == 0.0
    out = tmle_continuous_onestep(ds, solved, 0.5, EstimatorConfig())
    assert out.psi_hat == dml_estimate(solved, ds, 0.5).psi_hat


def test_onestep_h_zero_moves_only_q():
    ds, nuis = _cont_nuis()
    out = tmle_continuous_onestep(ds, nuis, 0.5, EstimatorConfig())
    eps = out.diagnostics["epsilon_trace"][0]
    assert eps != 0
    w = clever_covariate(ds.a, nuis.m, nuis.d)
    manual = dml_estimate(nuis.with_(q=nuis.q + eps * w), ds, 0.5)
    assert out.psi_hat == manual.psi_hat


def test_onestep_constant_clever_covariate():
    """w = c with h = c: q - v is unchanged, only the indicator term moves."""
    n = 40
    rng = np.random.default_rng(3)
    ds = validate_dataset(rng.normal(size=n), np.r_[np.ones(n // 2), -np.ones(n // 2)], None)
    d = np.full(n, 0.5)
    m = ds.a - 1.0  # w = (a - m) / d = 2
    q = np.zeros(n)
    nuis = NuisanceFits(m=m, q=q, v=np.zeros(n), d=d, fold_of=np.ones(n, dtype=np.int64), tau=0.5,
                        h=np.full(n, 2.0))
    out = tmle_continuous_onestep(ds, nuis, 0.5, EstimatorConfig())
    eps = out.diagnostics["epsilon_trace"][0]
    moved = nuis.with_(q=q + 2 * eps, v=np.zeros(n) + 2 * eps)
    assert out.psi_hat == dml_estimate(moved, ds, 0.5).psi_hat
    # (q~ - v~) = (q - v); so psi differs from dml only through the indicator
    res = ds.a - m
    ind_term = np.sum(res * (0.5 - (ds.y <= q + 2 * eps)) / d) / np.sum(res**2)
    assert out.psi_hat == pytest.approx(np.sum(res * (q - 0)) / np.sum(res**2) + ind_term)


def test_tmle_vs_equals_dml_vs_at_zero_epsilon(cont_data):
    cfg = EstimatorConfig(estimator="tmle-vs", folds=2, mean_learner="linear")
    nuis = vs_nuisances(cont_data, 0.5, cfg, fold_plan_for(cont_data, cfg))
    w = clever_covariate(cont_data.a, nuis.m, nuis.d)
    eps = solve_epsilon(cont_data.y, nuis.q, w, 0.5)
    solved = nuis.with_(q=nuis.q + eps * w, v=nuis.v + eps * nuis.h)
    assert solve_epsilon(cont_data.y, solved.q, w, 0.5) == 0.0
    assert tmle_vs(cont_data, 0.5, cfg, nuisances=solved).psi_hat == dml_vs(cont_data, 0.5, cfg, nuisances=solved).psi_hat


def test_tmle_vs_recovers_linear_effect():
    ds = linear_dataset(1500, seed=9, p=3, beta=1.0)
    cfg = EstimatorConfig(estimator="tmle-vs", folds=2, mean_learner="linear")
    out = tmle_vs(ds, 0.5, cfg)
    assert abs(out.psi_hat - out.diagnostics["beta_bar"]) < 0.05
    assert abs(out.psi_hat - 1.0) < 4 * out.se
