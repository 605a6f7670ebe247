"""Random forests for conditional quantiles and conditional means.

Trees are grown on a subsample drawn without replacement, choosing each
split among ``mtry`` randomly drawn features; a node is split only when both
children keep at least ``min_leaf`` of the rows the tree is grown on. Two
splitting rules are available:

``"mse"``
    CART squared-error reduction.
``"relabel"``
    Quantile relabeling: the node's outcomes are replaced by their class
    among the node's 0.1/0.5/0.9 empirical quantiles and the split
    maximizing the Gini purity of these classes is taken. This targets
    changes anywhere in the conditional distribution rather than in its
    mean.

With honesty the subsample is halved: the first half grows the tree, the
second half populates its leaves. Branches whose leaves receive no
populating rows are collapsed into their sibling so every reachable leaf is
nonempty. Quantile forests default to relabeling with honesty, regression
forests to squared error without.

The quantile forest predicts the weighted empirical quantile of the training
outcomes, where a training row's weight is the average over trees of
``1{same leaf as the query} / leaf size`` (leaf membership counted over the
populating rows); the regression forest averages leaf means.

Tree ``t`` draws from its own SplitMix64 stream started at
``mix64(seed + t * 0x9E3779B97F4A7C15)``, so a forest is a pure function of
(data, params, seed) and of nothing else.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..exceptions import ConfigError, EmptyForest

_RELABEL_Q = np.array([0.1, 0.5, 0.9])
_N_CLASSES = 4
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _next(state):
    """SplitMix64 step: returns (new_state, 64-bit output)."""
    state = state + _GOLDEN
    return state, _mix(state)


@njit(cache=True)
def _below(state, bound):
    """Uniform integer in [0, bound) (multiply-shift on the top 32 bits)."""
    state, r = _next(state)
    return state, np.int64(((r >> np.uint64(32)) * np.uint64(bound)) >> np.uint64(32))


@njit(cache=True)
def _best_split(X, y, samples, start, end, feat, order_buf, min_leaf):
    """Best squared-error split of samples[start:end] on feature ``feat``.

    Returns (gain proxy, threshold); the proxy is -inf when no split is valid.
    """
    m = end - start
    vals = np.empty(m)
    for k in range(m):
        vals[k] = X[samples[start + k], feat]
    order = np.argsort(vals, kind="mergesort")
    for k in range(m):
        order_buf[k] = samples[start + order[k]]
    total = 0.0
    for k in range(m):
        total += y[order_buf[k]]
    best = -np.inf
    thr = 0.0
    left = 0.0
    for k in range(m - 1):
        left += y[order_buf[k]]
        nl = k + 1
        if nl < min_leaf:
            continue
        if m - nl < min_leaf:
            break
        xa = vals[order[k]]
        xb = vals[order[k + 1]]
        if xb <= xa:
            continue
        right = total - left
        proxy = left * left / nl + right * right / (m - nl)
        if proxy > best:
            best = proxy
            thr = 0.5 * (xa + xb)
            if thr >= xb:  # midpoint rounding onto the upper value
                thr = xa
    return best, thr


@njit(cache=True)
def _best_split_classes(X, lab, samples, start, end, feat, order_buf, min_leaf):
    """Best Gini split of samples[start:end] on ``feat`` for 4 outcome classes.

    Returns (purity proxy sum_children sum_c n_c^2 / n_child, threshold).
    """
    m = end - start
    vals = np.empty(m)
    for k in range(m):
        vals[k] = X[samples[start + k], feat]
    order = np.argsort(vals, kind="mergesort")
    for k in range(m):
        order_buf[k] = samples[start + order[k]]
    tot = np.zeros(_N_CLASSES)
    for k in range(m):
        tot[lab[order_buf[k]]] += 1.0
    left = np.zeros(_N_CLASSES)
    best = -np.inf
    thr = 0.0
    for k in range(m - 1):
        left[lab[order_buf[k]]] += 1.0
        nl = k + 1
        if nl < min_leaf:
            continue
        if m - nl < min_leaf:
            break
        xa = vals[order[k]]
        xb = vals[order[k + 1]]
        if xb <= xa:
            continue
        sl = 0.0
        sr = 0.0
        for c in range(_N_CLASSES):
            sl += left[c] * left[c]
            r = tot[c] - left[c]
            sr += r * r
        proxy = sl / nl + sr / (m - nl)
        if proxy > best:
            best = proxy
            thr = 0.5 * (xa + xb)
            if thr >= xb:
                thr = xa
    return best, thr


@njit(cache=True)
def _relabel(y, samples, start, end, lab):
    """Class of each node row among the node's type-1 0.1/0.5/0.9 quantiles;
    returns the parent purity ``sum_c n_c^2 / m``."""
    m = end - start
    ys = np.empty(m)
    for k in range(m):
        ys[k] = y[samples[start + k]]
    ys.sort()
    cuts = np.empty(_N_CLASSES - 1)
    for c in range(_N_CLASSES - 1):
        cuts[c] = ys[max(int(math.ceil(_RELABEL_Q[c] * m)) - 1, 0)]
    cnt = np.zeros(_N_CLASSES)
    for k in range(start, end):
        yy = y[samples[k]]
        c = 0
        while c < _N_CLASSES - 1 and yy > cuts[c]:
            c += 1
        lab[samples[k]] = c
        cnt[c] += 1.0
    total = 0.0
    for c in range(_N_CLASSES):
        total += cnt[c] * cnt[c]
    return total / m


@njit(cache=True)
def _grow_tree(X, y, n_sub, min_leaf, mtry, relabel, state, samples, feat_buf, order_buf, lab,
               node_feat, node_thr, node_left, node_right, node_start, node_end, node_value):
    """Grow one tree in place; returns (number of nodes, rng state).

    ``samples[:n_sub]`` holds the tree's subsample; it is reordered so every
    node covers a contiguous range.
    """
    n_feat = X.shape[1]
    stack_node = np.empty(2 * n_sub + 1, dtype=np.int64)
    sp = 0
    node_start[0] = 0
    node_end[0] = n_sub
    n_nodes = 1
    stack_node[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        nd = stack_node[sp]
        start = node_start[nd]
        end = node_end[nd]
        m = end - start
        s = 0.0
        ss = 0.0
        for k in range(start, end):
            s += y[samples[k]]
        mean = s / m
        for k in range(start, end):
            d = y[samples[k]] - mean
            ss += d * d
        node_value[nd] = mean
        node_feat[nd] = -1
        if m < 2 * min_leaf or ss <= 1e-14 * (1.0 + abs(mean)) * (1.0 + abs(mean)) * m:
            continue
        parent = _relabel(y, samples, start, end, lab) if relabel else s * s / m
        # mtry features by partial Fisher-Yates
        for j in range(n_feat):
            feat_buf[j] = j
        best = -np.inf
        best_f = -1
        best_thr = 0.0
        for j in range(mtry):
            state, r = _below(state, n_feat - j)
            pick = j + r
            tmp = feat_buf[j]
            feat_buf[j] = feat_buf[pick]
            feat_buf[pick] = tmp
            f = feat_buf[j]
            if relabel:
                gain, thr = _best_split_classes(X, lab, samples, start, end, f, order_buf, min_leaf)
            else:
                gain, thr = _best_split(X, y, samples, start, end, f, order_buf, min_leaf)
            if gain > best:
                best = gain
                best_f = f
                best_thr = thr
        if best_f < 0 or best <= parent + 1e-12 * abs(parent):
            continue
        # partition samples[start:end] on the chosen split (stable)
        nl = 0
        for k in range(start, end):
            if X[samples[k], best_f] <= best_thr:
                order_buf[nl] = samples[k]
                nl += 1
        nr = nl
        for k in range(start, end):
            if X[samples[k], best_f] > best_thr:
                order_buf[nr] = samples[k]
                nr += 1
        for k in range(m):
            samples[start + k] = order_buf[k]
        node_feat[nd] = best_f
        node_thr[nd] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        node_left[nd] = lc
        node_right[nd] = rc
        node_start[lc] = start
        node_end[lc] = start + nl
        node_start[rc] = start + nl
        node_end[rc] = end
        stack_node[sp] = rc
        sp += 1
        stack_node[sp] = lc
        sp += 1
    return n_nodes, state


@njit(cache=True)
def _populate_honest(X, y, est, t, node_feat, node_thr, node_left, node_right, node_start, node_end,
                     node_value, n_nodes, out_samples):
    """Route the populating rows ``est`` down tree ``t``, collapse branches
    left without rows, and store the rows leaf by leaf in ``out_samples``."""
    cnt = np.zeros(n_nodes, dtype=np.int64)
    leaf_of = np.empty(est.shape[0], dtype=np.int64)
    for i in range(est.shape[0]):
        leaf_of[i] = _leaf(node_feat, node_thr, node_left, node_right, t, X[est[i]])
        cnt[leaf_of[i]] += 1
    # children have larger indices than their parent: a reverse sweep is bottom-up
    for nd in range(n_nodes - 1, -1, -1):
        if node_feat[t, nd] < 0:
            continue
        lc = node_left[t, nd]
        rc = node_right[t, nd]
        keep = -1
        if cnt[lc] == 0:
            keep = rc
        elif cnt[rc] == 0:
            keep = lc
        if keep >= 0:
            node_feat[t, nd] = node_feat[t, keep]
            node_thr[t, nd] = node_thr[t, keep]
            node_left[t, nd] = node_left[t, keep]
            node_right[t, nd] = node_right[t, keep]
        cnt[nd] = cnt[lc] + cnt[rc]
    # counting sort of the rows by (pruned) leaf
    fill = np.zeros(n_nodes, dtype=np.int64)
    for i in range(est.shape[0]):
        leaf_of[i] = _leaf(node_feat, node_thr, node_left, node_right, t, X[est[i]])
        fill[leaf_of[i]] += 1
    pos = 0
    for nd in range(n_nodes):
        if fill[nd] > 0:
            node_start[t, nd] = pos
            node_end[t, nd] = pos
            pos += fill[nd]
    for nd in range(n_nodes):
        node_value[t, nd] = 0.0
    for i in range(est.shape[0]):
        nd = leaf_of[i]
        out_samples[node_end[t, nd]] = est[i]
        node_end[t, nd] += 1
        node_value[t, nd] += y[est[i]]
    for nd in range(n_nodes):
        if fill[nd] > 0:
            node_value[t, nd] /= fill[nd]


@njit(cache=True)
def _grow_forest(X, y, n_trees, n_sub, min_leaf, mtry, relabel, honest, seed):
    n = X.shape[0]
    n_grow = n_sub // 2 if honest and n_sub >= 2 else n_sub
    max_nodes = 2 * n_grow + 1
    node_feat = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    node_thr = np.zeros((n_trees, max_nodes))
    node_left = np.zeros((n_trees, max_nodes), dtype=np.int64)
    node_right = np.zeros((n_trees, max_nodes), dtype=np.int64)
    node_start = np.zeros((n_trees, max_nodes), dtype=np.int64)
    node_end = np.zeros((n_trees, max_nodes), dtype=np.int64)
    node_value = np.zeros((n_trees, max_nodes))
    samples = np.zeros((n_trees, n_sub), dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=np.bool_)
    perm = np.empty(n, dtype=np.int64)
    feat_buf = np.empty(X.shape[1], dtype=np.int64)
    order_buf = np.empty(n, dtype=np.int64)
    lab = np.zeros(n, dtype=np.int64)
    for t in range(n_trees):
        state = _mix(np.uint64(seed) + np.uint64(t) * _GOLDEN)
        for i in range(n):
            perm[i] = i
        for i in range(n_sub):
            state, r = _below(state, n - i)
            pick = i + r
            tmp = perm[i]
            perm[i] = perm[pick]
            perm[pick] = tmp
        for i in range(n_sub):
            inbag[t, perm[i]] = True
        # the first n_grow draws grow the tree, the rest populate it (honesty)
        tree_samples = np.sort(perm[:n_grow])
        n_nodes, state = _grow_tree(X, y, n_grow, min_leaf, mtry, relabel, state, tree_samples, feat_buf,
                                    order_buf, lab, node_feat[t], node_thr[t], node_left[t], node_right[t],
                                    node_start[t], node_end[t], node_value[t])
        if n_grow < n_sub:
            _populate_honest(X, y, np.sort(perm[n_grow:n_sub]), t, node_feat, node_thr, node_left, node_right,
                             node_start, node_end, node_value, n_nodes, samples[t])
        else:
            samples[t] = tree_samples
    return node_feat, node_thr, node_left, node_right, node_start, node_end, node_value, samples, inbag


@njit(cache=True)
def _leaf(node_feat, node_thr, node_left, node_right, t, x):
    nd = 0
    while node_feat[t, nd] >= 0:
        if x[node_feat[t, nd]] <= node_thr[t, nd]:
            nd = node_left[t, nd]
        else:
            nd = node_right[t, nd]
    return nd


@njit(cache=True)
def _quantile_predict(Xq, taus, node_feat, node_thr, node_left, node_right, node_start, node_end,
                      samples, rank, y_sorted, inbag, oob):
    n_q = Xq.shape[0]
    n_trees = node_feat.shape[0]
    n = y_sorted.shape[0]
    out = np.empty((n_q, taus.shape[0]))
    w = np.zeros(n)
    for i in range(n_q):
        w[:] = 0.0
        used = 0
        for pass_ in range(2):
            for t in range(n_trees):
                if oob and pass_ == 0 and inbag[t, i]:
                    continue
                nd = _leaf(node_feat, node_thr, node_left, node_right, t, Xq[i])
                s = node_start[t, nd]
                e = node_end[t, nd]
                inv = 1.0 / (e - s)
                for k in range(s, e):
                    w[rank[samples[t, k]]] += inv
                used += 1
            if used > 0:
                break
        total = 0.0
        for k in range(n):
            total += w[k]
        for j in range(taus.shape[0]):
            target = taus[j] * total * (1.0 - 1e-12)
            acc = 0.0
            val = y_sorted[n - 1]
            for k in range(n):
                acc += w[k]
                if w[k] > 0.0 and acc >= target:
                    val = y_sorted[k]
                    break
            out[i, j] = val
    return out


@njit(cache=True)
def _mean_predict(Xq, node_feat, node_thr, node_left, node_right, node_value, inbag, oob):
    n_q = Xq.shape[0]
    n_trees = node_feat.shape[0]
    out = np.empty(n_q)
    for i in range(n_q):
        acc = 0.0
        used = 0
        for pass_ in range(2):
            for t in range(n_trees):
                if oob and pass_ == 0 and inbag[t, i]:
                    continue
                nd = _leaf(node_feat, node_thr, node_left, node_right, t, Xq[i])
                acc += node_value[t, nd]
                used += 1
            if used > 0:
                break
        out[i] = acc / used
    return out


SPLIT_RULES = ("relabel", "mse")


@dataclass(frozen=True)
class ForestParams:
    """Forest settings.

    ``mtry=None`` means ``ceil(p / 3)``. ``splitting`` (``"relabel"`` or
    ``"mse"``) and ``honesty`` left at ``None`` take the forest kind's
    default: relabeling with honesty for quantile forests, squared error
    without honesty for regression forests.
    """

    num_trees: int = 500
    min_leaf: int = 5
    mtry: int | None = None
    subsample: float = 0.5
    splitting: str | None = None
    honesty: bool | None = None

    def rules(self, quantile):
        splitting = self.splitting or ("relabel" if quantile else "mse")
        if splitting not in SPLIT_RULES:
            raise ConfigError(f"splitting must be one of {SPLIT_RULES}, got {splitting!r}")
        honesty = quantile if self.honesty is None else bool(self.honesty)
        return splitting, honesty

    def resolve(self, n, p):
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError("subsample must lie in (0, 1]")
        mtry = math.ceil(p / 3) if self.mtry is None else int(self.mtry)
        mtry = min(max(mtry, 1), p)
        n_sub = max(1, int(math.floor(self.subsample * n)))
        return mtry, n_sub


@dataclass(frozen=True, eq=False)
class _Trees:
    node_feat: np.ndarray
    node_thr: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_end: np.ndarray
    node_value: np.ndarray
    samples: np.ndarray
    inbag: np.ndarray


def _build(X, y, params, seed, quantile):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, p = X.shape
    if n < 1 or p < 1:
        raise EmptyForest(f"cannot grow trees on {n} rows and {p} features")
    mtry, n_sub = params.resolve(n, p)
    splitting, honesty = params.rules(quantile)
    arrays = _grow_forest(X, y, int(params.num_trees), n_sub, int(params.min_leaf), mtry,
                          splitting == "relabel", honesty, np.uint64(int(seed) & ((1 << 64) - 1)))
    return _Trees(*arrays)


@dataclass(frozen=True, eq=False)
class QuantileForestModel:
    """Fitted quantile forest (immutable)."""

    trees: _Trees
    y_train: np.ndarray
    y_sorted: np.ndarray
    rank: np.ndarray
    params: ForestParams
    seed: int

    @property
    def num_trees(self):
        return self.trees.node_feat.shape[0]

    def predict(self, X, taus, oob=False):
        """Quantile predictions of shape (n_query, len(taus)).

        With ``oob=True`` the queries must be the training rows in order and
        each row uses only trees whose subsample excluded it.
        """
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        taus = np.atleast_1d(np.asarray(taus, dtype=float))
        if oob and X.shape[0] != self.y_train.shape[0]:
            raise ValueError("out-of-bag prediction requires the training rows")
        t = self.trees
        return _quantile_predict(X, taus, t.node_feat, t.node_thr, t.node_left, t.node_right,
                                 t.node_start, t.node_end, t.samples, self.rank, self.y_sorted,
                                 t.inbag, bool(oob))


def fit_quantile_forest(features, y, params=None, seed=0):
    """Grow a quantile forest on ``features`` (exposure first, then covariates).

    Raises
    ------
    EmptyForest
        When there are no training rows or no features.
    """
    params = params or ForestParams()
    y = np.asarray(y, dtype=float).reshape(-1)
    trees = _build(features, y, params, seed, True)
    order = np.argsort(y, kind="stable")
    rank = np.empty(y.shape[0], dtype=np.int64)
    rank[order] = np.arange(y.shape[0])
    return QuantileForestModel(trees, y.copy(), y[order].copy(), rank, params, int(seed))


def qf_predict(model, features, tau, oob=False):
    """Quantile-forest prediction at a single ``tau`` for each feature row."""
    if model.num_trees < 1:
        raise EmptyForest("forest has no trees")
    return model.predict(features, [tau], oob=oob)[:, 0]


@dataclass(frozen=True, eq=False)
class RegressionForestModel:
    trees: _Trees
    params: ForestParams
    seed: int

    def predict(self, X, oob=False):
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        t = self.trees
        return _mean_predict(X, t.node_feat, t.node_thr, t.node_left, t.node_right, t.node_value,
                             t.inbag, bool(oob))


def fit_regression_forest(features, y, params=None, seed=0):
    params = params or ForestParams()
    return RegressionForestModel(_build(features, y, params, seed, False), params, int(seed))


class QuantileForest(RegressorMixin, BaseEstimator):
    """sklearn-style quantile regression forest.

    Parameters
    ----------
    tau : float or sequence of float
        Quantile level(s) returned by :meth:`predict`.
    num_trees, min_leaf, mtry, subsample, splitting, honesty, seed
        Forest settings, see :class:`ForestParams`.
    """

    def __init__(self, tau=0.5, num_trees=500, min_leaf=5, mtry=None, subsample=0.5, splitting="relabel",
                 honesty=True, seed=0):
        self.tau = tau
        self.splitting = splitting
        self.honesty = honesty
        self.num_trees = num_trees
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.subsample = subsample
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        params = ForestParams(self.num_trees, self.min_leaf, self.mtry, self.subsample, self.splitting, self.honesty)
        self.model_ = fit_quantile_forest(X, y, params, self.seed)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, tau=None):
        check_is_fitted(self, "model_")
        X = check_array(X)
        tau = self.tau if tau is None else tau
        out = self.model_.predict(X, np.atleast_1d(tau))
        return out[:, 0] if np.ndim(tau) == 0 else out

    def oob_predict(self, X, tau=None):
        check_is_fitted(self, "model_")
        tau = self.tau if tau is None else tau
        out = self.model_.predict(check_array(X), np.atleast_1d(tau), oob=True)
        return out[:, 0] if np.ndim(tau) == 0 else out


class RegressionForest(RegressorMixin, BaseEstimator):
    """sklearn-style regression forest sharing the quantile forest's trees."""

    def __init__(self, num_trees=100, min_leaf=5, mtry=None, subsample=0.5, splitting="mse", honesty=False,
                 seed=0):
        self.splitting = splitting
        self.honesty = honesty
        self.num_trees = num_trees
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.subsample = subsample
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        params = ForestParams(self.num_trees, self.min_leaf, self.mtry, self.subsample, self.splitting, self.honesty)
        self.model_ = fit_regression_forest(X, y, params, self.seed)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X))
