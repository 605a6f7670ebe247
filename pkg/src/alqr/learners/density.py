"""Kernel density of quantile-regression residuals evaluated at zero.

Under the working assumption that ``Y - Q_tau(Y | A, L)`` is independent of
``(A, L)``, the conditional density of ``Y`` at its conditional quantile is
the same for every row and equals the residual density at zero. It is
estimated by a weighted Gaussian KDE with Silverman's bandwidth and floored
at ``floor_factor / IQR(y)`` so that its reciprocal stays bounded.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import DegenerateResiduals

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class DensityEstimate:
    value_at_zero: float
    bandwidth: float
    floor: float
    floored: bool


def _weighted_quantile_interp(x, w, q):
    """Weighted quantile with linear interpolation (type 7 when w is constant)."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ws = w[order]
    cw = np.cumsum(ws)
    total = cw[-1]
    if xs.size == 1:
        return float(xs[0])
    # plotting positions (cumulative weight minus own weight) scaled to [0, 1]
    pos = (cw - ws) / (total - ws[-1]) if total > ws[-1] else np.linspace(0.0, 1.0, xs.size)
    return float(np.interp(q, pos, xs))


def weighted_iqr(x, w):
    return _weighted_quantile_interp(x, w, 0.75) - _weighted_quantile_interp(x, w, 0.25)


def silverman_bandwidth(x, w):
    """``0.9 * min(sd, IQR / 1.34) * n_eff^(-1/5)``, with Kish's effective size.

    When the IQR is zero (more than half the mass at one value) the standard
    deviation alone is used.
    """
    w = w / w.sum()
    mean = float(np.dot(w, x))
    sd = math.sqrt(max(float(np.dot(w, (x - mean) ** 2)), 0.0))
    iqr = weighted_iqr(x, w)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    n_eff = 1.0 / float(np.sum(w**2))
    return 0.9 * spread * n_eff ** (-0.2)


def residual_density_at_quantile(residuals, weights=None, outcome=None, bandwidth=None, floor_factor=1e-3):
    """Weighted Gaussian KDE of ``residuals`` at 0.

    Parameters
    ----------
    residuals : array of shape (n,)
    weights : nonnegative weights, default all ones
    outcome : outcome values defining the floor ``floor_factor / IQR(outcome)``;
        defaults to the residuals themselves
    bandwidth : float, optional
        Forced bandwidth; skips the Silverman rule and the degeneracy check.

    Raises
    ------
    DegenerateResiduals
        When the data-driven bandwidth is zero (all residuals equal).
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    w = np.ones(r.shape[0]) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    keep = w > 0
    r, w = r[keep], w[keep]
    if bandwidth is None:
        h = silverman_bandwidth(r, w)
        if not h > 0:
            raise DegenerateResiduals("residuals have zero spread; bandwidth would be 0")
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    z = r / h
    value = float(np.dot(w, np.exp(-0.5 * z * z)) / (w.sum() * h * _SQRT_2PI))
    if outcome is None:
        y, wy = r, w
    else:
        y = np.asarray(outcome, dtype=float).reshape(-1)
        wy = np.ones(y.shape[0]) if weights is None or y.shape[0] != keep.shape[0] else np.asarray(weights, dtype=float).reshape(-1)
        y, wy = y[wy > 0], wy[wy > 0]
    iqr_y = weighted_iqr(y, wy) if y.size > 1 else 0.0
    if not iqr_y > 0:
        # fall back to the standard deviation when the IQR degenerates
        iqr_y = float(np.std(y)) if y.size > 1 else 0.0
    floor = floor_factor / iqr_y if iqr_y > 0 else floor_factor
    floored = value < floor
    return DensityEstimate(max(value, floor), h, floor, bool(floored))


def qr_residual_density(residuals, weights=None, outcome=None, floor_factor=1e-3, rel_tol=1e-10):
    """:func:`residual_density_at_quantile` for linear quantile-regression
    residuals, ignoring the rows the fit interpolates.

    A vertex solution passes exactly through as many rows as it has
    coefficients; their zero residuals are an artifact of the fit, not draws
    from the error law, and would inflate the density at zero. Residuals with
    ``|r| <= rel_tol * (1 + max|outcome|)`` are dropped (kept if that would
    leave fewer than two rows).
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    w = np.ones(r.shape[0]) if weights is None else np.asarray(weights, dtype=float).reshape(-1).copy()
    ref = r if outcome is None else np.asarray(outcome, dtype=float).reshape(-1)
    interpolated = np.abs(r) <= rel_tol * (1.0 + float(np.max(np.abs(ref))))
    if np.count_nonzero(~interpolated & (w > 0)) >= 2:
        w = np.where(interpolated, 0.0, w)
    return residual_density_at_quantile(r, w, outcome=outcome, floor_factor=floor_factor)
