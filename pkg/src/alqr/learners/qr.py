"""Linear quantile regression by check-loss minimization.

The solver is a vertex-walking simplex (see :mod:`._simplex`) started from
the rows with smallest least-squares residuals, or from a supplied basis when
warm-starting closely related fits. The final vertex is accepted when its
dual multipliers certify a unique optimum. When the certificate fails or the
optimum may be flat, the primal LP is solved exactly with HiGHS and ties are
broken towards the lexicographically smallest coefficient vector.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..exceptions import NotConverged, RankDeficient
from ._simplex import STATUS_OPTIMAL, greedy_basis, simplex_qr

_DUAL_TOL = 1e-9


def check_loss(u, tau):
    """Koenker-Bassett check loss ``u * (tau - I(u <= 0))``; vectorized."""
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u <= 0))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class QrFit:
    """Fitted linear quantile model.

    ``coefficients`` align with the design columns used in the fit; for
    models built by :func:`stepwise_qr_aic` these are intercept, exposure,
    then the covariates listed in ``selected``.
    """

    coefficients: np.ndarray
    selected: tuple
    exposure_coef: float
    objective: float
    tau: float
    basis: np.ndarray | None = field(default=None, repr=False, compare=False)

    def predict(self, design):
        return np.asarray(design, dtype=float) @ self.coefficients


def _objective(X, y, b, tau):
    r = y - X @ b
    return float(np.sum(r * (tau - (r < 0))))


def _vertex_from_residuals(X, y, r):
    """Interpolate the p rows with smallest |r|; None when they are singular."""
    p = X.shape[1]
    order = np.argsort(np.abs(r), kind="stable")
    basis = order[:p]
    Xh = X[basis]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            lu = linalg.lu_factor(Xh, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return None, None, None
    if np.min(np.abs(np.diag(lu[0]))) <= 1e-10 * max(1.0, np.max(np.abs(Xh))):
        return None, None, None
    b = linalg.lu_solve(lu, y[basis], check_finite=False)
    return b, basis, lu


def _certify(X, y, b, basis, lu, tau):
    """Dual multipliers of a vertex.

    Returns ``"unique"`` when every basic multiplier lies strictly inside
    ``[tau - 1, tau]``, ``"flat"`` when one sits on the boundary (the optimum
    may be non-unique) and ``"fail"`` when the vertex is not optimal.
    """
    n, p = X.shape
    r = y - X @ b
    nonbasic = np.ones(n, dtype=bool)
    nonbasic[basis] = False
    scale = max(1.0, float(np.max(np.abs(y))))
    if np.any(np.abs(r[nonbasic]) <= 1e-12 * scale):
        return "flat"
    psi = tau - (r[nonbasic] < 0)
    g = -(X[nonbasic].T @ psi)
    mult = linalg.lu_solve(lu, g, trans=1, check_finite=False)
    lo, hi = tau - 1.0, tau
    if np.any(mult < lo - _DUAL_TOL) or np.any(mult > hi + _DUAL_TOL):
        return "fail"
    if np.any(mult < lo + _DUAL_TOL) or np.any(mult > hi - _DUAL_TOL):
        return "flat"
    return "unique"


def _highs(X, y, tau, cost_vec=None, bound=None, fixed=None):
    """Solve the primal LP with HiGHS.

    Without ``cost_vec`` this minimizes the check loss; otherwise it
    minimizes ``cost_vec @ b`` subject to the check loss staying below
    ``bound`` and coefficients in ``fixed`` (index -> value) held fixed.
    """
    n, p = X.shape
    nvar = p + 2 * n
    loss_c = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    A_eq = np.hstack([X, np.eye(n), -np.eye(n)])
    b_eq = y
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    A_ub = b_ub = None
    if cost_vec is None:
        c = loss_c
    else:
        c = np.concatenate([cost_vec, np.zeros(2 * n)])
        A_ub = loss_c.reshape(1, -1)
        b_ub = np.array([bound])
        for j, v in (fixed or {}).items():
            # earlier coordinates were minimized, so an upper bound suffices
            # (with the LP's own feasibility tolerance, ~1e-7)
            bounds[j] = (None, v + 1e-7 * (1.0 + abs(v)))
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise NotConverged(f"LP solver failed: {res.message}")
    return res.x[:p]


def _exact_lexicographic(X, y, tau):
    b = _highs(X, y, tau)
    opt = _objective(X, y, b, tau)
    # relative to the data scale so that the LP's own feasibility tolerance
    # cannot make the bounded subproblems infeasible
    slack = 1e-9 * max(1.0, opt, float(np.abs(y).sum()))
    fixed = {}
    p = X.shape[1]
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        bj = _highs(X, y, tau, cost_vec=e, bound=opt + slack, fixed=fixed)
        fixed[j] = float(bj[j])
    b = np.array([fixed[j] for j in range(p)])
    # snap the slightly relaxed solution back onto an exact vertex
    vb, _, _ = _vertex_from_residuals(X, y, y - X @ b)
    if vb is not None and _objective(X, y, vb, tau) <= opt + slack and np.all(vb <= b + 1e-7 * (1 + np.abs(b))):
        b = vb
    return b


def _cold_basis(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    order = np.argsort(np.abs(y - X @ coef), kind="stable").astype(np.int64)
    basis, ok = greedy_basis(X, order)
    return basis if ok else None


def _solve(X, y, tau, basis=None, max_iter=None):
    """Return ``(coefficients, basis)``; ``basis`` is None after the LP fallback."""
    n, p = X.shape
    X = np.ascontiguousarray(X)
    y = np.ascontiguousarray(y)
    if max_iter is None:
        max_iter = 20 * (n + p)
    if basis is None or len(basis) != p:
        basis = _cold_basis(X, y)
    if basis is not None:
        b, basis, status, _ = simplex_qr(X, y, float(tau), np.asarray(basis, dtype=np.int64), int(max_iter))
        if status == STATUS_OPTIMAL and np.all(np.isfinite(b)):
            return b, basis
        if np.all(np.isfinite(b)) and np.all(np.abs(y - X @ b) <= 1e-12 * max(1.0, float(np.max(np.abs(y))))):
            # zero loss on a full-rank design is the unique minimizer, even
            # when the fully degenerate vertex stalls the pivoting
            return b, basis
    if n < p or np.linalg.matrix_rank(X) < p:
        raise RankDeficient(f"design with {p} columns is rank deficient on {n} weighted rows")
    try:
        return _exact_lexicographic(X, y, tau), None
    except NotConverged:
        raise
    except Exception as exc:  # pragma: no cover - solver internals
        raise NotConverged(str(exc)) from exc


def _drop_column_basis(X, basis, j):
    """Warm-start basis after removing column ``j``: release the basic row that
    leans hardest on that column."""
    if basis is None:
        return None
    try:
        binv = np.linalg.inv(X[basis])
    except np.linalg.LinAlgError:
        return None
    k = int(np.argmax(np.abs(binv[j])))
    return np.delete(basis, k)


def fit_parametric_qr(X, y, tau, weights=None, exposure_index=None, basis=None):
    """Minimize ``sum_i w_i rho_tau(y_i - x_i'b) / sum_i w_i`` over ``b``.

    ``X`` is used as given (include a column of ones for an intercept).
    ``basis`` optionally warm-starts the solver with row indices (counted
    among the positive-weight rows) of a nearby vertex.

    Raises
    ------
    RankDeficient
        When the rows with positive weight do not have full column rank.
    NotConverged
        When neither the simplex nor the exact LP route succeeds.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    keep = w > 0
    Xw = X[keep] * w[keep, None]
    yw = y[keep] * w[keep]
    if p == 0:
        coef = np.empty(0)
        basis = None
    else:
        if basis is None and (Xw.shape[0] < p or np.linalg.matrix_rank(Xw) < p):
            raise RankDeficient(f"design with {p} columns is rank deficient on {Xw.shape[0]} weighted rows")
        coef, basis = _solve(Xw, yw, tau, basis=basis)
    r = y - X @ coef
    objective = float(np.dot(w, check_loss(r, tau)) / w.sum())
    exposure_coef = float(coef[exposure_index]) if exposure_index is not None else float("nan")
    return QrFit(
        coefficients=coef,
        selected=tuple(range(p)),
        exposure_coef=exposure_coef,
        objective=objective,
        tau=float(tau),
        basis=basis,
    )


def qr_aic(objective, k, n, scale):
    """``2k + 2n log(mean check loss)``; the loss is floored at ``1e-10 * scale``
    so exact interpolations compare by dimension alone."""
    return 2.0 * k + 2.0 * n * np.log(max(objective, 1e-10 * scale))


def stepwise_qr_aic(dataset, tau, forced_exposure=True, rows=None):
    """Backward elimination over covariates by quantile AIC.

    Starts from intercept + exposure + all covariates and repeatedly drops the
    covariate whose removal lowers AIC the most; stops when no removal lowers
    it. The intercept is never dropped, nor the exposure when
    ``forced_exposure`` is set. ``rows`` restricts the fit to a subset.

    Returns a :class:`QrFit` whose coefficients are ``[intercept, exposure,
    *covariates in selected]`` (the exposure entry is absent if it was
    dropped) and whose ``selected`` lists retained covariate indices.
    """
    y = dataset.y if rows is None else dataset.y[rows]
    a = dataset.a if rows is None else dataset.a[rows]
    l = dataset.l if rows is None else dataset.l[rows]
    w = dataset.weights if rows is None else dataset.weights[rows]
    n, p = l.shape
    scale = float(np.dot(w, np.abs(y)) / w.sum()) or 1.0
    base = np.column_stack([np.ones(n), a])

    keep = w > 0

    def design(keep_a, cols):
        return np.column_stack([base if keep_a else base[:, :1], l[:, cols]])

    def fit(keep_a, cols, parent=None, drop=None):
        basis = None
        if parent is not None:
            basis = _drop_column_basis(parent[0][keep] * w[keep, None], parent[1].basis, drop)
        return fit_parametric_qr(design(keep_a, cols), y, tau, weights=w, basis=basis)

    keep_a = True
    cols = list(range(p))
    current = fit(keep_a, cols)
    current_aic = qr_aic(current.objective, current.coefficients.size, n, scale)
    # Lower bounds on each candidate's objective: dropping j from a smaller
    # model can only fit worse than dropping j from a larger one, so losses
    # seen in earlier rounds bound the current round from below. Candidates
    # are fitted in bound order until no unfitted bound can beat the best.
    bound = {}
    while True:
        candidates = []
        if not forced_exposure and keep_a:
            candidates.append(("a", None))
        candidates.extend(("l", j) for j in cols)
        if not candidates:
            break
        parent = (design(keep_a, cols), current)
        floor = current.objective
        order = sorted(candidates, key=lambda c: (max(bound.get(c, floor), floor), candidates.index(c)))
        best = None
        for cand in order:
            lb = max(bound.get(cand, floor), floor) * (1.0 - 1e-12)
            if best is not None and lb > best[0].objective:
                break
            kind, j = cand
            trial_a = keep_a and kind != "a"
            trial_cols = [c for c in cols if c != j] if kind == "l" else cols
            drop = 1 if kind == "a" else (2 if keep_a else 1) + cols.index(j)
            trial = fit(trial_a, trial_cols, parent, drop)
            bound[cand] = trial.objective
            # equal losses: prefer the candidate listed first
            if best is None or trial.objective < best[0].objective or (
                trial.objective == best[0].objective and candidates.index(cand) < best[4]
            ):
                best = (trial, trial_a, trial_cols, cand, candidates.index(cand))
        trial, trial_a, trial_cols, cand, _ = best
        aic = qr_aic(trial.objective, trial.coefficients.size, n, scale)
        if not aic < current_aic:
            break
        current_aic, current, keep_a, cols = aic, trial, trial_a, trial_cols
        bound.pop(cand, None)
    exposure_coef = float(current.coefficients[1]) if keep_a else 0.0
    return QrFit(
        coefficients=current.coefficients,
        selected=tuple(cols),
        exposure_coef=exposure_coef,
        objective=current.objective,
        tau=float(tau),
        basis=current.basis,
    )


class LinearQuantileRegression(RegressorMixin, BaseEstimator):
    """sklearn-style wrapper around :func:`fit_parametric_qr`.

    Parameters
    ----------
    tau : float
        Quantile level in (0, 1).
    fit_intercept : bool
    """

    def __init__(self, tau=0.5, fit_intercept=True):
        self.tau = tau
        self.fit_intercept = fit_intercept

    def _design(self, X):
        return np.column_stack([np.ones(X.shape[0]), X]) if self.fit_intercept else X

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        fit = fit_parametric_qr(self._design(X), y, self.tau, weights=sample_weight)
        coef = fit.coefficients
        self.intercept_ = float(coef[0]) if self.fit_intercept else 0.0
        self.coef_ = coef[1:] if self.fit_intercept else coef
        self.objective_ = fit.objective
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_


class StepwiseQuantileRegression(BaseEstimator):
    """Backward AIC selection with the first feature (the exposure) forced in.

    ``fit(X, y)`` expects the exposure in column 0 and covariates after it.
    """

    def __init__(self, tau=0.5, forced_exposure=True):
        self.tau = tau
        self.forced_exposure = forced_exposure

    def fit(self, X, y, sample_weight=None):
        from ..core import validate_dataset

        X, y = check_X_y(X, y, y_numeric=True)
        ds = validate_dataset(y, X[:, 0], X[:, 1:], "continuous", sample_weight)
        self.fit_ = stepwise_qr_aic(ds, self.tau, forced_exposure=self.forced_exposure)
        self.selected_ = self.fit_.selected
        self.exposure_coef_ = self.fit_.exposure_coef
        self.n_features_in_ = X.shape[1]
        return self

    def design(self, X):
        X = check_array(X)
        return stepwise_design(X[:, 0], X[:, 1:], self.selected_, True)

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.design(X) @ self.fit_.coefficients


def stepwise_design(a, l, selected, keep_exposure=True):
    """Design matrix matching a :func:`stepwise_qr_aic` fit."""
    a = np.asarray(a, dtype=float).reshape(-1)
    cols = [np.ones(a.shape[0])]
    if keep_exposure:
        cols.append(a)
    design = np.column_stack(cols)
    if len(selected):
        design = np.column_stack([design, np.asarray(l)[:, list(selected)]])
    return design
