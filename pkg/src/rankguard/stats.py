"""Deterministic statistical primitives.

Every function here is pure: inputs are never modified and no state is kept
between calls.
"""
import math

import numpy as np
from scipy.stats import rankdata

from .errors import (
    DegenerateCrossSection,
    InvalidValue,
    SingularDesign,
    UndefinedAUROC,
    UndefinedCorrelation,
)


def _as_finite(values, name="values"):
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise InvalidValue(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise InvalidValue(f"{name} contains non-finite entries")
    return arr


def percentile_rank(values):
    """Cross-sectional percentile rank in [0, 1].

    Ties share their average rank; the lowest value maps to 0 and the highest
    to 1 via ``(avg_rank - 1) / (N - 1)``.
    """
    arr = _as_finite(values)
    n = arr.size
    if n < 2:
        raise DegenerateCrossSection(f"need at least 2 values to rank, got {n}")
    return (rankdata(arr, method="average") - 1.0) / (n - 1.0)


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def spearman(x, y):
    """Spearman rank correlation (Pearson correlation of percentile ranks)."""
    x = _as_finite(x, "x")
    y = _as_finite(y, "y")
    if x.size != y.size:
        raise InvalidValue(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise UndefinedCorrelation(f"need at least 3 observations, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("constant input vector")
    return _pearson(percentile_rank(x), percentile_rank(y))


def auroc(scores, labels):
    """Area under the ROC curve by the rank-sum method.

    Equals P(score_pos > score_neg) + 0.5 * P(tie).
    """
    scores = _as_finite(scores, "scores")
    labels = np.asarray(labels).astype(bool)
    if labels.shape != scores.shape:
        raise InvalidValue("scores and labels must have the same shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROC("labels contain a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ewma(series, halflife, min_periods=0):
    """Exponentially weighted mean with normalized weights.

    Decay per observation is ``1 - exp(-ln2 / halflife)``. Missing inputs (NaN)
    are skipped without resetting state; the output at a missing position
    carries the current estimate. Positions before ``min_periods``
    observations have been seen are NaN.
    """
    if halflife <= 0:
        raise ValueError("halflife must be positive")
    x = np.asarray(series, dtype=float)
    alpha = 1.0 - math.exp(-math.log(2.0) / halflife)
    keep = 1.0 - alpha
    out = np.full(x.shape, np.nan)
    num = den = 0.0
    seen = 0
    for i, v in enumerate(x):
        if np.isfinite(v):
            num = num * keep + v
            den = den * keep + 1.0
            seen += 1
        if seen >= max(min_periods, 1):
            out[i] = num / den
    return out


def expanding_zscore(series, min_periods=2, std_floor=1e-9):
    """z_t = (x_t - mean(x_1..t)) / max(std(x_1..t), std_floor).

    Uses the sample standard deviation (ddof=1) over observed values only.
    NaN inputs produce NaN outputs and do not enter the running moments.
    """
    if min_periods < 2:
        raise ValueError("min_periods must be >= 2")
    x = np.asarray(series, dtype=float)
    out = np.full(x.shape, np.nan)
    n = 0
    mean = m2 = 0.0
    for i, v in enumerate(x):
        if not np.isfinite(v):
            continue
        n += 1
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
        if n >= min_periods:
            std = math.sqrt(max(m2, 0.0) / (n - 1))
            out[i] = (v - mean) / max(std, std_floor)
    return out


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(_as_finite(a, "a"))
    b = np.sort(_as_finite(b, "b"))
    if a.size == 0 or b.size == 0:
        raise InvalidValue("both samples must be non-empty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ols_residualize(y, X):
    """Residuals of an OLS fit of ``y`` on ``X`` plus an intercept column."""
    y = _as_finite(y, "y")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise InvalidValue("X and y row counts differ")
    if not np.all(np.isfinite(X)):
        raise InvalidValue("X contains non-finite entries")
    design = np.column_stack([np.ones(y.size), X])
    if design.shape[0] < design.shape[1] + 1:
        raise SingularDesign(
            f"{design.shape[0]} rows cannot identify {design.shape[1]} coefficients"
        )
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesign("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return y - design @ coef


def quantile(values, p):
    """Linear-interpolation quantile (type 7)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise InvalidValue("quantile of an empty sample")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return float(np.quantile(arr, p))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))
