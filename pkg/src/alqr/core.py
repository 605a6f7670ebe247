"""Data containers, fold assignment, configuration and result types."""

import enum
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ._rng import make_rng
from .exceptions import (
    ConfigError,
    DegenerateWeights,
    KTooLarge,
    LengthMismatch,
    NonBinaryExposure,
    NonFiniteValue,
)

Z_975 = 1.959964


class ExposureKind(str, enum.Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class Estimator(str, enum.Enum):
    PLUGIN = "plugin"
    DML = "dml"
    TMLE = "tmle"
    DML_VS = "dml-vs"
    TMLE_VS = "tmle-vs"

    @property
    def uses_selection(self):
        return self in (Estimator.DML_VS, Estimator.TMLE_VS)


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"


class TmleMode(str, enum.Enum):
    ITERATE = "iterate"
    ONE_STEP = "onestep"


def _coerce_enum(cls, value, name):
    if isinstance(value, cls):
        return value
    try:
        return cls(str(value).lower().replace("_", "-") if cls is Estimator else str(value).lower())
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"invalid {name} {value!r}; expected one of {choices}") from None


def _frozen_array(x, dtype=float):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome ``y``, exposure ``a``, covariates ``l`` (n x p) and sampling weights.

    Build instances with :func:`validate_dataset`; the arrays are read-only.
    """

    y: np.ndarray
    a: np.ndarray
    l: np.ndarray
    weights: np.ndarray
    exposure_kind: ExposureKind

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.l.shape[1]

    @property
    def is_binary(self):
        return self.exposure_kind is ExposureKind.BINARY

    @property
    def features(self):
        """Design for learners of Q(Y | A, L): exposure first, then covariates."""
        return np.column_stack([self.a, self.l])

    def subset(self, idx):
        return Dataset(
            y=_frozen_array(self.y[idx]),
            a=_frozen_array(self.a[idx]),
            l=_frozen_array(self.l[idx]),
            weights=_frozen_array(self.weights[idx]),
            exposure_kind=self.exposure_kind,
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.exposure_kind is other.exposure_kind
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.l, other.l)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def validate_dataset(y, a, l=None, exposure_kind=ExposureKind.CONTINUOUS, weights=None):
    """Check raw columns and return an immutable :class:`Dataset`.

    Parameters
    ----------
    y, a : array-like of shape (n,)
    l : array-like of shape (n, p) or (n,), optional
        Covariates; ``None`` means no covariates (p = 0).
    exposure_kind : {"binary", "continuous"}
    weights : array-like of shape (n,), optional
        Nonnegative sampling weights, default all ones.

    Raises
    ------
    LengthMismatch, NonFiniteValue, NonBinaryExposure, DegenerateWeights
    """
    kind = _coerce_enum(ExposureKind, exposure_kind, "exposure_kind")
    y = np.asarray(y, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    n = y.shape[0]
    if l is None:
        l = np.empty((n, 0))
    l = np.asarray(l, dtype=float)
    if l.ndim == 1:
        l = l.reshape(-1, 1)
    if l.ndim != 2:
        raise LengthMismatch(f"covariates must be 2-dimensional, got ndim={l.ndim}")
    if a.shape[0] != n or l.shape[0] != n:
        raise LengthMismatch(f"column lengths differ: y={n}, a={a.shape[0]}, l={l.shape[0]}")
    if n < 2:
        raise LengthMismatch(f"need at least 2 observations, got {n}")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.shape[0] != n:
        raise LengthMismatch(f"weights have length {weights.shape[0]}, expected {n}")
    for name, arr in (("y", y), ("a", a), ("l", l), ("weights", weights)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"column {name} contains NaN or Inf")
    if np.any(weights < 0):
        raise DegenerateWeights("weights must be nonnegative")
    if not weights.sum() > 0:
        raise DegenerateWeights("weights sum to zero")
    if kind is ExposureKind.BINARY and not np.all((a == 0) | (a == 1)):
        bad = a[(a != 0) & (a != 1)][0]
        raise NonBinaryExposure(f"binary exposure has value {bad!r} outside {{0, 1}}")
    return Dataset(
        y=_frozen_array(y),
        a=_frozen_array(a),
        l=_frozen_array(l),
        weights=_frozen_array(weights),
        exposure_kind=kind,
    )


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of rows to folds ``1..k``.

    ``stratified`` is False when a binary exposure had too few observations in
    one level to stratify, in which case plain random folds were used.
    """

    assignments: np.ndarray
    k: int
    seed: int
    stratified: bool = False

    def test_index(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def train_index(self, fold):
        if self.k == 1:
            return np.arange(self.assignments.shape[0])
        return np.flatnonzero(self.assignments != fold)

    def splits(self):
        """Yield ``(fold, train_idx, test_idx)``; with k = 1 both cover all rows."""
        for fold in range(1, self.k + 1):
            yield fold, self.train_index(fold), self.test_index(fold)

    def __eq__(self, other):
        if not isinstance(other, FoldPlan):
            return NotImplemented
        return (self.k, self.seed, self.stratified) == (other.k, other.seed, other.stratified) and np.array_equal(
            self.assignments, other.assignments
        )

    __hash__ = None


def make_folds(dataset, k, seed):
    """Random partition into ``k`` folds whose sizes differ by at most one.

    Binary exposures are stratified: rows of each level are shuffled and dealt
    round-robin, continuing the deal across levels, so every fold receives both
    levels whenever each level has at least ``k`` rows.
    """
    n = dataset.n
    k = int(k)
    if k < 1:
        raise ConfigError(f"fold count must be >= 1, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds n={n}")
    assignments = np.ones(n, dtype=np.int64)
    if k == 1:
        return FoldPlan(_frozen_array(assignments, np.int64), 1, int(seed), stratified=False)
    rng = make_rng(seed)
    stratified = False
    if dataset.is_binary:
        groups = [np.flatnonzero(dataset.a == level) for level in (0.0, 1.0)]
        if all(g.size >= k for g in groups):
            stratified = True
            order = np.concatenate([rng.permutation(g) for g in groups])
        else:
            order = rng.permutation(n)
    else:
        order = rng.permutation(n)
    assignments[order] = np.arange(n) % k + 1
    return FoldPlan(_frozen_array(assignments, np.int64), k, int(seed), stratified=stratified)


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator choice and learner settings.

    ``folds = 1`` disables cross-fitting: nuisances are fit and evaluated on
    all rows. ``mean_learner`` picks the candidates for E(A|L) and the other
    conditional-mean nuisances: ``"auto"`` selects between the parametric and
    forest learner by cross-validated risk.
    """

    tau: float = 0.5
    estimator: Estimator = Estimator.TMLE
    folds: int = 5
    seed: int = 0
    link: Link = Link.IDENTITY
    tmle_mode: TmleMode = TmleMode.ITERATE
    num_trees: int = 500
    min_leaf: int = 5
    mtry: int | None = None
    subsample: float = 0.5
    mean_learner: str = "auto"
    mean_trees: int = 100
    density_floor_factor: float = 1e-3
    targeting_tol: float = 1e-4
    max_targeting_iter: int = 50

    def __post_init__(self):
        object.__setattr__(self, "estimator", _coerce_enum(Estimator, self.estimator, "estimator"))
        object.__setattr__(self, "link", _coerce_enum(Link, self.link, "link"))
        object.__setattr__(self, "tmle_mode", _coerce_enum(TmleMode, self.tmle_mode, "tmle_mode"))
        if not 0.0 < float(self.tau) < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if int(self.folds) < 1:
            raise ConfigError(f"folds must be >= 1, got {self.folds}")
        if int(self.num_trees) < 1 or int(self.mean_trees) < 1:
            raise ConfigError("forest sizes must be >= 1")
        if int(self.min_leaf) < 1:
            raise ConfigError("min_leaf must be >= 1")
        if not 0.0 < float(self.subsample) <= 1.0:
            raise ConfigError("subsample must lie in (0, 1]")
        if self.mean_learner not in ("auto", "linear", "forest"):
            raise ConfigError(f"mean_learner must be auto, linear or forest, got {self.mean_learner!r}")
        for name in ("density_floor_factor", "targeting_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if int(self.max_targeting_iter) < 1:
            raise ConfigError("max_targeting_iter must be >= 1")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class EstimatorOutput:
    psi_hat: float
    se: float
    ci_low: float
    ci_high: float
    tau: float
    estimator: str
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, psi_hat, se, tau, estimator, **diagnostics):
        psi_hat = float(psi_hat)
        se = float(se)
        if se < 0 or math.isnan(se):
            raise ValueError(f"standard error must be >= 0, got {se}")
        return cls(
            psi_hat=psi_hat,
            se=se,
            ci_low=psi_hat - Z_975 * se,
            ci_high=psi_hat + Z_975 * se,
            tau=float(tau),
            estimator=str(getattr(estimator, "value", estimator)),
            diagnostics=diagnostics,
        )

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["diagnostics"] = _jsonable(self.diagnostics)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**{f.name: data[f.name] for f in fields(cls)})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def weighted_mean(x, w):
    """Hajek mean: sum(w * x) / sum(w)."""
    return float(np.dot(w, x) / np.sum(w))


def weighted_quantile(x, w, q):
    """Type-1 (lower) weighted quantile: smallest x with cumulative weight >= q * total."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(w[order])
    total = cw[-1]
    pos = np.searchsorted(cw, q * total * (1.0 - 1e-12), side="left")
    return float(x[order][min(pos, x.size - 1)])
