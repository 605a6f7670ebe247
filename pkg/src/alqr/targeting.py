"""Targeted estimation: clever covariates, the targeting equation and its solver.

Targeting perturbs the quantile fit along the clever covariate
``w = (a - m) / d`` until the sample version of the influence function's
indicator term,

    S = sum_i omega_i w_i (tau - 1{y_i <= q_i}) / sum_i omega_i,

is (close to) zero. Along ``q + eps * w`` the function ``S(eps)`` is a
nonincreasing step function, so its root is found exactly by scanning its
breakpoints rather than by a numeric root finder.
"""

from dataclasses import dataclass

import numpy as np

from .core import Link, TmleMode
from .engine import IDENTITY, dml_estimate, indicator
from .exceptions import AllZeroCleverCovariates, ConfigError
from .learners.density import qr_residual_density, residual_density_at_quantile


def clever_covariate(a, m, d):
    """``(a - m) / d``; ``d`` is already floored positive."""
    return (np.asarray(a, dtype=float) - m) / d


def targeting_sum(y, q, w, tau, weights=None):
    """``sum omega w (tau - 1{y <= q}) / sum omega``."""
    w = np.asarray(w, dtype=float)
    omega = np.ones(w.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    return float(np.dot(omega, w * (tau - indicator(y, q))) / omega.sum())


def _float_thresholds(y, q, w):
    """Per-row breakpoints of ``1{y <= q + eps * w}`` as evaluated in floating
    point: for ``w > 0`` the smallest ``eps`` with the indicator on, for
    ``w < 0`` the largest. ``fl(q + eps * w)`` is monotone in ``eps``, so
    these are exact flips of the computed step function."""
    t = (y - q) / w
    pos = w > 0
    on = lambda e: y <= q + e * w
    # move onto the "on" side, then walk back while the neighbour is still on
    for _ in range(64):
        bad = ~on(t)
        if not bad.any():
            break
        t = np.where(bad, np.nextafter(t, np.where(pos, np.inf, -np.inf)), t)
    for _ in range(64):
        nxt = np.nextafter(t, np.where(pos, -np.inf, np.inf))
        step = on(nxt)
        if not step.any():
            break
        t = np.where(step, nxt, t)
    return t


def solve_epsilon(y, q, w, tau, weights=None):
    """Global minimizer of ``|S(eps)|`` for the update ``q + eps * w``.

    Candidates are 0, every breakpoint ``(y_i - q_i) / w_i`` (adjusted to
    where the floating-point indicator actually flips), the midpoints
    between consecutive distinct breakpoints, and one point beyond each end
    (standing in for the +-infinity sentinels). Candidate values are first
    computed from cumulative breakpoint drops; candidates are then
    re-evaluated with :func:`targeting_sum` itself, best first, so the
    returned ``eps`` attains the reported value exactly. Ties go to the smallest ``|eps|``,
    then the smallest ``eps``.

    Raises
    ------
    AllZeroCleverCovariates
        When every ``w_i`` is zero.
    """
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    omega = np.ones(w.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    active = (w != 0) & (omega > 0)
    if not np.any(active):
        raise AllZeroCleverCovariates("all clever covariates are zero")
    total = omega.sum()
    bp = _float_thresholds(y[active], q[active], w[active])
    contrib = omega[active] * w[active] / total
    # S(-inf): rows with w > 0 have indicator 0, rows with w < 0 indicator 1
    s_minus = float(np.sum(np.where(contrib > 0, tau * contrib, (tau - 1.0) * contrib)))
    order = np.argsort(bp, kind="stable")
    bp_sorted = bp[order]
    c_sorted = contrib[order]
    uniq, start = np.unique(bp_sorted, return_index=True)
    drop_pos = np.add.reduceat(np.where(c_sorted > 0, c_sorted, 0.0), start)
    drop_neg = np.add.reduceat(np.where(c_sorted < 0, -c_sorted, 0.0), start)
    # S just left of each breakpoint, at it, and just right of it
    before = s_minus - np.concatenate([[0.0], np.cumsum(drop_pos + drop_neg)[:-1]])
    at = before - drop_pos
    after = before - drop_pos - drop_neg

    gap = uniq[-1] - uniq[0]
    pad = 0.5 * gap if gap > 0 else max(1.0, abs(uniq[0]))
    cand_eps = [uniq, 0.5 * (uniq[:-1] + uniq[1:]), [uniq[0] - pad, uniq[-1] + pad]]
    cand_val = [at, after[:-1], [s_minus, after[-1]]]
    # eps = 0
    k = np.searchsorted(uniq, 0.0, side="left")
    if k < uniq.size and uniq[k] == 0.0:
        s0 = at[k]
    elif k == 0:
        s0 = s_minus
    else:
        s0 = after[k - 1]
    cand_eps.append([0.0])
    cand_val.append([s0])
    eps_all = np.concatenate([np.asarray(c, dtype=float) for c in cand_eps])
    val_all = np.abs(np.concatenate([np.asarray(c, dtype=float) for c in cand_val]))
    scale = float(np.sum(np.abs(contrib))) + 1e-300
    # Re-evaluate in order of predicted value. A midpoint between breakpoints
    # that are adjacent floats predicts a state no float eps attains; its
    # actual value is a neighbour's, so keep going until no remaining
    # prediction can beat (or tie) the best attained value.
    order = np.lexsort((eps_all, np.abs(eps_all), val_all))
    best = None
    for i in order:
        if best is not None and val_all[i] > best[0] + 1e-9 * scale:
            break
        e = float(eps_all[i])
        s = abs(targeting_sum(y, q + e * w, w, tau, omega))
        key = (s, abs(e), e)
        if best is None or key < best:
            best = key
    return best[2]


@dataclass(frozen=True)
class TargetingState:
    """Result of the targeting loop."""

    q_tilde: np.ndarray
    epsilon_trace: list
    s_trace: list
    converged: bool
    w: np.ndarray


def _tolerance(w, omega, config):
    return config.targeting_tol * float(np.dot(omega, np.abs(w)) / omega.sum())


def _require_identity(config):
    link = getattr(config.link, "value", config.link)
    if link != Link.IDENTITY.value:
        raise ConfigError("targeted estimators support only the identity link")


def tmle_binary(dataset, nuisances, tau, config):
    """Iterative TMLE for a binary exposure.

    Each iteration solves for ``eps``, moves ``q`` by ``eps * w`` and the
    counterfactual quantiles by ``eps * (1 - m) / d`` and ``eps * (-m) / d``
    (so ``v = q1 m + q0 (1 - m)`` keeps holding), re-estimates the residual
    density on the pooled residuals ``y - q`` and recomputes ``w`` and
    ``S``. An iteration is accepted only if ``|S|`` strictly decreases; the
    loop stops at ``|S| <= targeting_tol * mean|w|``, at the first
    non-decreasing step, or after ``max_targeting_iter`` accepted steps. In
    one-step mode exactly one update is made with the density frozen.
    """
    _require_identity(config)
    if nuisances.q1 is None or nuisances.q0 is None:
        raise ConfigError("binary TMLE needs counterfactual quantiles q1 and q0")
    y, a, omega = dataset.y, dataset.a, dataset.weights
    m = nuisances.m
    q, q1, q0, d = nuisances.q.copy(), nuisances.q1.copy(), nuisances.q0.copy(), nuisances.d.copy()
    w = clever_covariate(a, m, d)
    s = targeting_sum(y, q, w, tau, omega)
    tol = _tolerance(w, omega, config)
    s_trace = [abs(s)]
    eps_trace = []
    converged = abs(s) <= tol
    one_step = TmleMode(config.tmle_mode) is TmleMode.ONE_STEP
    iterations = 0
    while not converged and iterations < config.max_targeting_iter:
        eps = solve_epsilon(y, q, w, tau, omega)
        cand_q = q + eps * w
        cand_q1 = q1 + eps * (1.0 - m) / d
        cand_q0 = q0 + eps * (-m) / d
        if one_step:
            cand_d = d
        else:
            dens = residual_density_at_quantile(y - cand_q, omega, outcome=y,
                                                floor_factor=config.density_floor_factor)
            cand_d = np.full(d.shape[0], dens.value_at_zero)
        cand_w = clever_covariate(a, m, cand_d)
        cand_s = targeting_sum(y, cand_q, cand_w, tau, omega)
        if not abs(cand_s) < abs(s):
            break
        q, q1, q0, d, w, s = cand_q, cand_q1, cand_q0, cand_d, cand_w, cand_s
        iterations += 1
        eps_trace.append(float(eps))
        s_trace.append(abs(s))
        converged = abs(s) <= tol
        if one_step:
            break
    targeted = nuisances.with_(q=q, q1=q1, q0=q0, d=d, v=q1 * m + q0 * (1.0 - m))
    state = TargetingState(q, eps_trace, s_trace, bool(converged), w)
    return dml_estimate(
        targeted, dataset, tau, IDENTITY, name="tmle",
        targeting_residual=float(s), epsilon_trace=state.epsilon_trace, s_trace=state.s_trace,
        n_iterations=iterations, converged=state.converged, targeting_tol=tol,
    )


def pooled_density(dataset, q, config):
    """Residual density at zero re-estimated from all rows' ``y - q`` (rows
    with ``q`` interpolating ``y`` exactly are ignored)."""
    dens = qr_residual_density(dataset.y - q, dataset.weights, outcome=dataset.y,
                                        floor_factor=config.density_floor_factor)
    return np.full(dataset.n, dens.value_at_zero)


def tmle_continuous_onestep(dataset, nuisances, tau, config, name="tmle", refit_density=False):
    """One-step TMLE using the regression ``h = E[w | L]``.

    ``eps`` solves the targeting equation once at the initial fit; then
    ``q~ = q + eps w`` and ``v~ = v + eps h``, and the estimate is the
    debiased expression at ``(q~, v~)``. The density is frozen unless
    ``refit_density``, in which case the indicator term uses the density of
    the pooled residuals ``y - q~``.
    """
    _require_identity(config)
    if nuisances.h is None:
        raise ConfigError("one-step TMLE needs the clever-covariate regression h")
    y, a, omega = dataset.y, dataset.a, dataset.weights
    w = clever_covariate(a, nuisances.m, nuisances.d)
    s_initial = targeting_sum(y, nuisances.q, w, tau, omega)
    eps = solve_epsilon(y, nuisances.q, w, tau, omega)
    q_t = nuisances.q + eps * w
    v_t = nuisances.v + eps * nuisances.h
    s_final = targeting_sum(y, q_t, w, tau, omega)
    targeted = nuisances.with_(q=q_t, v=v_t)
    if refit_density:
        targeted = targeted.with_(d=pooled_density(dataset, q_t, config))
    extra = {}
    if nuisances.beta is not None:
        res = a - nuisances.m
        extra["beta_bar"] = float(np.dot(omega, res * res * nuisances.beta) / np.dot(omega, res * res))
    return dml_estimate(
        targeted, dataset, tau, IDENTITY, name=name,
        targeting_residual=s_final, epsilon_trace=[float(eps)], s_trace=[abs(s_initial), abs(s_final)],
        n_iterations=1, converged=abs(s_final) <= _tolerance(w, omega, config), **extra,
    )


def tmle_vs(dataset, tau, config, fold_plan=None, nuisances=None):
    """Variable-selection TMLE: stepwise-QR nuisances plus one-step targeting.

    ``psi = beta_bar + sum w (a - m)[(w - h) eps + (tau - 1{y <= q~}) / d~] / sum w (a - m)^2``
    where ``beta_bar`` averages the per-fold exposure coefficients with
    weights ``(a - m)^2`` and ``d~`` is the density of the pooled residuals
    ``y - q~``. (Each fold's in-sample quantile-regression residuals include
    exact zeros at the basis rows, which inflate a density estimated from
    them; ``w`` and ``eps`` still use that initial density.)
    """
    from .engine import vs_nuisances

    _require_identity(config)
    nuisances = nuisances if nuisances is not None else vs_nuisances(dataset, tau, config, fold_plan)
    return tmle_continuous_onestep(dataset, nuisances, tau, config, name="tmle-vs", refit_density=True)


def dml_vs(dataset, tau, config, fold_plan=None, nuisances=None):
    """Variable-selection debiased estimator (``eps = 0`` in :func:`tmle_vs`,
    so the indicator term uses the density of the pooled residuals ``y - q``)."""
    from .engine import vs_nuisances

    _require_identity(config)
    nuisances = nuisances if nuisances is not None else vs_nuisances(dataset, tau, config, fold_plan)
    res = dataset.a - nuisances.m
    omega = dataset.weights
    beta_bar = float(np.dot(omega, res * res * nuisances.beta) / np.dot(omega, res * res))
    pooled = nuisances.with_(d=pooled_density(dataset, nuisances.q, config))
    return dml_estimate(pooled, dataset, tau, IDENTITY, name="dml-vs", beta_bar=beta_bar)
