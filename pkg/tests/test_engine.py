import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alqr import EstimatorConfig, make_folds, validate_dataset
from alqr.core import Link
from alqr.engine import (
    IDENTITY,
    NuisanceFits,
    binary_weighted_estimand,
    dml_estimate,
    eif_evaluate,
    estimand_population_value,
    estimate_nuisances,
    fold_plan_for,
    make_link,
    plugin_estimate,
)
from alqr.exceptions import DegenerateExposureVariance, DegeneratePropensity, NonPositiveQuantile
from alqr.simulation import Truth

from conftest import linear_dataset


def _nuis(m, q, v, d, **kw):
    n = len(m)
    return NuisanceFits(m=np.asarray(m, float), q=np.asarray(q, float), v=np.asarray(v, float),
                        d=np.asarray(d, float), fold_of=np.ones(n, dtype=np.int64), tau=kw.pop("tau", 0.5), **kw)


def _random_instance(seed, n=30, binary=False, weights=True):
    rng = np.random.default_rng(seed)
    a = (rng.uniform(size=n) < 0.5).astype(float) if binary else rng.normal(size=n)
    if binary:
        a[:2] = [0, 1]
    y = rng.normal(size=n) + a
    w = rng.uniform(0.2, 3, size=n) if weights else None
    ds = validate_dataset(y, a, rng.normal(size=(n, 2)), "binary" if binary else "continuous", w)
    m = rng.uniform(0.2, 0.8, size=n)
    q = y + rng.normal(scale=0.5, size=n)
    v = q + rng.normal(scale=0.3, size=n)
    d = rng.uniform(0.2, 2, size=n)
    return ds, _nuis(m, q, v, d)


def test_plugin_example():
    ds = validate_dataset([0, 0, 0, 0], [0, 1, 0, 1], None)
    nuis = _nuis([0.5] * 4, [1, 2, 1, 2], [1.5] * 4, [1] * 4)
    assert plugin_estimate(nuis, ds) == 1.0


def test_plugin_zero_when_q_equals_v():
    ds, nuis = _random_instance(0)
    assert plugin_estimate(nuis.with_(v=nuis.q), ds) == 0.0


def test_plugin_exposure_scale():
    ds, nuis = _random_instance(1, weights=False)
    c = 4.0
    ds_c = validate_dataset(ds.y, c * ds.a, ds.l)
    assert plugin_estimate(nuis.with_(m=c * nuis.m), ds_c) == pytest.approx(plugin_estimate(nuis, ds) / c, rel=1e-14)


def test_eif_examples():
    val = eif_evaluate(3.0, 1.0, 0.5, 2.0, 1.5, 0.5, 1.0, 0.5, 0.25)
    assert val == pytest.approx(2.0)
    assert eif_evaluate(3.0, 0.5, 0.5, 2.0, 1.5, 0.5, 1.0, 0.5, 0.25) == 0.0
    # equality counts in the indicator
    a, m, denom, d = 1.0, 0.2, 0.3, 0.7
    val = eif_evaluate(2.0, a, m, 2.0, 2.0, d, 0.0, 0.5, denom)
    assert val == pytest.approx((a - m) / denom * (-0.5) / d)


def test_dml_cancellation_example():
    ds = validate_dataset([1, 2, 1, 2], [0, 1, 0, 1], None)
    nuis = _nuis([0.5] * 4, [1, 2, 1, 2], [1.5] * 4, [0.8] * 4)
    out = dml_estimate(nuis, ds, 0.5)
    assert out.psi_hat == pytest.approx(plugin_estimate(nuis, ds), abs=1e-15)


def test_dml_se_formula():
    # phi = {1, -1} arises from a two-row instance with psi = 0 and denom = 1
    ds = validate_dataset([10.0, 10.0], [1.0, -1.0], None)
    nuis = _nuis([0, 0], [1.0, 1.0], [0.0, 0.0], [1e6, 1e6], tau=0.5)
    out = dml_estimate(nuis, ds, 0.5)
    phi = eif_evaluate(ds.y, ds.a, nuis.m, nuis.q, nuis.v, nuis.d, out.psi_hat, 0.5, 1.0)
    assert np.sqrt(np.sum(phi**2)) / 2 == pytest.approx(out.se)


@given(seed=st.integers(0, 10_000), binary=st.booleans())
@settings(max_examples=100, deadline=None)
def test_if_mean_zero(seed, binary):
    ds, nuis = _random_instance(seed, binary=binary)
    out = dml_estimate(nuis, ds, 0.3)
    assert abs(out.diagnostics["if_mean"]) <= 1e-10 * out.diagnostics["if_scale"]


def test_location_invariance():
    """Bit-identical whenever the shifted values are exactly representable
    (values on a dyadic grid, shifted by a small integer)."""
    ds, nuis = _random_instance(3)
    grid = lambda x: np.round(np.asarray(x) * 1024) / 1024
    ds = validate_dataset(grid(ds.y), ds.a, ds.l, ds.exposure_kind, ds.weights)
    nuis = nuis.with_(q=grid(nuis.q), v=grid(nuis.v))
    c = 8.0
    ds_c = validate_dataset(ds.y + c, ds.a, ds.l, ds.exposure_kind, ds.weights)
    n_c = nuis.with_(q=nuis.q + c, v=nuis.v + c)
    assert plugin_estimate(n_c, ds_c) == plugin_estimate(nuis, ds)
    assert dml_estimate(n_c, ds_c, 0.5).psi_hat == dml_estimate(nuis, ds, 0.5).psi_hat


def test_log_link_with_unit_quantiles():
    rng = np.random.default_rng(4)
    n = 20
    ds = validate_dataset(rng.normal(size=n) + 1, rng.normal(size=n), None)
    # q = 1 everywhere, so E[q | L] = 1 and E[log q | L] = 0
    nuis = _nuis(np.zeros(n), np.ones(n), np.ones(n), np.full(n, 0.5), v_log=np.zeros(n))
    ident = dml_estimate(nuis, ds, 0.5)
    log = dml_estimate(nuis, ds, 0.5, make_link("log"))
    assert log.psi_hat == pytest.approx(ident.psi_hat, abs=1e-14)
    with pytest.raises(NonPositiveQuantile):
        dml_estimate(nuis.with_(q=-np.ones(n)), ds, 0.5, make_link("log"))


def test_denominator_guard():
    ds, nuis = _random_instance(5)
    with pytest.raises(DegenerateExposureVariance):
        plugin_estimate(nuis.with_(m=np.asarray(ds.a, float).copy()), ds)


def test_binary_weighted_estimand():
    assert binary_weighted_estimand([3, 3], [1, 1], [0.5, 0.5]) == 2.0
    assert binary_weighted_estimand([1, 3], [0, 0], [0.2, 0.8]) == pytest.approx(2.0)
    val = binary_weighted_estimand([1, 100], [0, 0], [0.5, 0.999999])
    assert val == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(DegeneratePropensity):
        binary_weighted_estimand([1, 2], [0, 0], [0.0, 1.0])


def test_binary_decomposition_and_crossfit_independence(bin_data):
    cfg = EstimatorConfig(num_trees=30, mean_learner="linear", folds=3, seed=2)
    plan = fold_plan_for(bin_data, cfg)
    nuis = estimate_nuisances(bin_data, 0.5, cfg, plan)
    assert np.array_equal(nuis.v, nuis.q1 * nuis.m + nuis.q0 * (1 - nuis.m))
    assert np.all(nuis.d > 0)
    # perturbing rows of fold 1 leaves predictions for fold 1 unchanged
    test1 = plan.test_index(1)
    y = np.array(bin_data.y)
    y[test1] += 50.0
    pert = validate_dataset(y, bin_data.a, bin_data.l, "binary")
    nuis2 = estimate_nuisances(pert, 0.5, cfg, plan)
    assert np.array_equal(nuis.q[test1], nuis2.q[test1])
    assert np.array_equal(nuis.m[test1], nuis2.m[test1])
    other = plan.test_index(2)
    assert not np.array_equal(nuis.q[other], nuis2.q[other])


def test_binary_decomposition_constant():
    # v = q1 m + q0 (1 - m) with q1 = 2, q0 = 1, m = 0.3 gives 1.3
    m, q1, q0 = np.full(5, 0.3), np.full(5, 2.0), np.full(5, 1.0)
    assert np.allclose(q1 * m + q0 * (1 - m), 1.3)


def test_k1_uses_full_data(cont_data):
    cfg = EstimatorConfig(num_trees=20, mean_learner="linear", folds=1)
    nuis = estimate_nuisances(cont_data, 0.5, cfg, make_folds(cont_data, 1, 0))
    assert np.all(nuis.fold_of == 1)


@pytest.mark.parametrize("exp", ["exp1c", "exp1a"])
def test_estimand_forms_agree(exp):
    res = estimand_population_value(Truth(exp), 0.5, 200_000, seed=11)
    assert res["difference"] <= 3 * res["se_difference"] + 1e-12
    assert abs(res["form3"] - 1.0) <= 3 * res["se3"] + 1e-12


class _TwoStratum:
    """Q(a, L) = beta(L) a + L; L in {0, 1} w.p. 1/2, A | L ~ N(0, sd(L)^2)."""
    binary = False
    sd = np.array([1.0, 2.0])
    beta = np.array([1.0, 3.0])

    def sample_l(self, rng, n):
        return (rng.uniform(size=n) < 0.5).astype(int).reshape(-1, 1)

    def sample_a(self, rng, L):
        return self.sd[L[:, 0]] * rng.normal(size=L.shape[0])

    def m(self, L):
        return np.zeros(L.shape[0])

    def a_law(self, L):
        return np.zeros(L.shape[0]), self.sd[L[:, 0]]

    def quantile(self, a, L, tau):
        return self.beta[L[:, 0]] * a + L[:, 0]


def test_estimand_two_strata():
    t = _TwoStratum()
    expected = np.sum(t.sd**2 * t.beta) / np.sum(t.sd**2)  # variance-weighted beta = 2.6
    res = estimand_population_value(t, 0.5, 200_000, seed=3)
    assert abs(res["form3"] - expected) <= 3 * res["se3"]
    assert abs(res["form2"] - expected) <= 3 * res["se2"]


def test_estimand_randomized_binary():
    """A independent of L: the estimand is E[q1 - q0]."""
    truth = Truth("exp3")
    res = estimand_population_value(truth, 0.5, 200_000, seed=5)
    assert abs(res["form3"] - 1.0) <= 3 * res["se3"] + 1e-12
