"""Goodness-of-fit metrics for true-vs-predicted regression plots."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats


class UndefinedFitError(ValueError):
    """The linear fit has no defined correlation (a constant vector)."""


def r_squared(true_values, predicted) -> tuple[float, float]:
    """Least-squares fit of ``predicted`` on ``true_values``.

    Returns ``(r2, slope)`` where r2 is the squared Pearson correlation, i.e.
    the coefficient of determination of that fit.
    """
    x = np.asarray(true_values, dtype=np.float64).ravel()
    y = np.asarray(predicted, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} true vs {y.size} predicted")
    if x.size < 2:
        raise ValueError("r_squared needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0:
        raise UndefinedFitError("true values are constant")
    if syy == 0.0:
        raise UndefinedFitError("predicted values are constant")
    sxy = float(dx @ dy)
    r2 = min(1.0, (sxy * sxy) / (sxx * syy))
    return r2, sxy / sxx


def t_quantile(q: float, df: int) -> float:
    """Student-t quantile, refined by Newton steps on the CDF.

    ``scipy.stats.t.ppf`` alone can be off by a few 1e-11 relative (e.g. at
    df = 1, where the exact value is tan(pi (q - 1/2))); the CDF is accurate
    to rounding, so two or three Newton steps recover full precision.
    """
    t = float(stats.t.ppf(q, df))
    for _ in range(3):
        step = (float(stats.t.cdf(t, df)) - q) / float(stats.t.pdf(t, df))
        t -= step
        if abs(step) <= 1e-16 * max(1.0, abs(t)):
            break
    return t


def confidence_interval(per_trial, level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width over independent trials."""
    v = np.asarray(per_trial, dtype=np.float64).ravel()
    k = v.size
    if k < 2:
        raise ValueError(f"confidence_interval needs at least 2 trials, got {k}")
    mean = float(v.mean())
    s = float(v.std(ddof=1))
    t = t_quantile(0.5 + level / 2.0, k - 1)
    return mean, t * s / math.sqrt(k)
