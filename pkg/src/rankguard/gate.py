"""Strategy-level regime-trust gate.

The health index combines three daily components:

* realized efficacy: EWMA of the matured RankIC stream (IC of the date tau
  positions back, whose forward returns have fully realized),
* drift: feature-mean shifts, score distribution shift and return
  correlation spikes,
* disagreement between the primary and a secondary model.

Each component is z-scored on an expanding window and combined into
``h_raw = z_real - alpha * z_drift - beta * z_disagree``; ``H = sigmoid(h_raw)``
and the gate ``G = clip((H - lo) / (hi - lo), 0, 1)``.
"""
import logging
from dataclasses import dataclass
from decimal import Decimal

import numpy as np
import pandas as pd

from . import stats
from .errors import ConfigError, NumericalError
from .panel import DAILY_RETURN, return_column

logger = logging.getLogger(__name__)

DRIFT_FEATURES = ("vol_20d", "mom_1m", "adv_20d", "vix_percentile_252d", "market_vol_21d", "vol_60d")
GATE_COLUMNS = ["date", "matured_ic", "h_real", "h_drift", "h_disagree", "H", "G", "active"]


@dataclass(frozen=True)
class GateConfig:
    halflife: float = 30.0
    min_periods: int = 20
    alpha: float = 0.3
    beta: float = 0.3
    theta: float = 0.2
    h_low: float = 0.3
    h_high: float = 0.7
    drift_weights: tuple = (0.4, 0.3, 0.3)
    drift_feature_window: int = 252
    drift_min_history: int = 20
    score_ref_window: int = 60
    corr_window: int = 20
    horizon_lag: int = 20

    def __post_init__(self):
        object.__setattr__(self, "drift_weights", tuple(float(w) for w in self.drift_weights))
        if len(self.drift_weights) != 3 or abs(sum(self.drift_weights) - 1.0) > 1e-12:
            raise ConfigError("drift_weights must be three weights summing to 1")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if not self.h_low < self.h_high:
            raise ConfigError("h_low must be below h_high")
        if self.halflife <= 0 or self.min_periods < 1 or self.horizon_lag < 0:
            raise ConfigError("invalid EWMA or lag settings")


def daily_rank_ic(panel, horizon, score_col="score_primary"):
    """Per-date Spearman(score, forward return) over calendar positions (NaN if undefined)."""
    ret = panel.column(return_column(horizon))
    score = panel.column(score_col)
    out = np.full(panel.n_dates, np.nan)
    for d, sl in panel.date_slices():
        m = np.isfinite(ret[sl]) & np.isfinite(score[sl])
        if m.sum() < 3:
            continue
        try:
            out[d] = stats.spearman(score[sl][m], ret[sl][m])
        except NumericalError:
            pass
    return out


def matured_ic_stream(ic, tau):
    """Value at t is the IC of position t - tau; the first tau positions are undefined."""
    ic = np.asarray(ic, dtype=float)
    out = np.full(ic.shape, np.nan)
    if tau == 0:
        return ic.copy()
    if tau < ic.size:
        out[tau:] = ic[:-tau]
    return out


def h_real(matured, halflife=30.0, min_periods=20):
    return stats.ewma(matured, halflife, min_periods)


def _per_date_means(panel, columns):
    cols = [c for c in columns if c in panel.frame.columns]
    if not cols:
        return np.empty((panel.n_dates, 0))
    means = panel.frame.groupby("date_idx", sort=True)[cols].mean()
    return means.reindex(range(panel.n_dates)).to_numpy(dtype=float)


def feature_drift(panel, window=252, min_history=20):
    """Mean |z| of today's cross-sectional feature means against the trailing
    ``window`` prior dates."""
    M = _per_date_means(panel, DRIFT_FEATURES)
    out = np.full(panel.n_dates, np.nan)
    for t in range(panel.n_dates):
        lo = max(0, t - window)
        if t - lo < min_history:
            continue
        hist = M[lo:t]
        zs = []
        for j in range(M.shape[1]):
            h = hist[:, j]
            h = h[np.isfinite(h)]
            if h.size < min_history or not np.isfinite(M[t, j]):
                continue
            sd = h.std(ddof=1)
            if sd > 0:
                zs.append(abs(M[t, j] - h.mean()) / sd)
        if zs:
            out[t] = float(np.mean(zs))
    return out


def score_drift(panel, score_col="score_primary", window=60):
    """KS statistic of today's scores against pooled scores of the prior ``window`` dates."""
    score = panel.column(score_col)
    per_date = [np.empty(0)] * panel.n_dates
    for d, sl in panel.date_slices():
        s = score[sl]
        per_date[d] = s[np.isfinite(s)]
    out = np.full(panel.n_dates, np.nan)
    for t in range(window, panel.n_dates):
        ref = np.concatenate(per_date[t - window:t])
        if ref.size and per_date[t].size:
            out[t] = stats.ks_two_sample(per_date[t], ref)
    return out


def _daily_return_matrix(panel):
    if DAILY_RETURN not in panel.frame.columns:
        return None
    wide = panel.frame.pivot(index="date_idx", columns="asset", values=DAILY_RETURN)
    return wide.reindex(range(panel.n_dates)).to_numpy(dtype=float)


def correlation_spike(panel, window=20):
    """Mean pairwise Pearson correlation of daily returns over the trailing
    ``window`` dates, using assets with a complete window."""
    R = _daily_return_matrix(panel)
    out = np.full(panel.n_dates, np.nan)
    if R is None:
        return out
    for t in range(window - 1, panel.n_dates):
        block = R[t - window + 1: t + 1]
        keep = np.all(np.isfinite(block), axis=0)
        block = block[:, keep]
        block = block[:, block.std(axis=0) > 0]
        k = block.shape[1]
        if k < 2:
            continue
        c = np.corrcoef(block, rowvar=False)
        out[t] = float(c[np.triu_indices(k, 1)].mean())
    return out


def h_drift(panel, config=GateConfig(), score_col="score_primary"):
    """Weighted drift composite; undefined components drop out and the
    remaining weights are renormalized."""
    parts = np.column_stack([
        feature_drift(panel, config.drift_feature_window, config.drift_min_history),
        score_drift(panel, score_col, config.score_ref_window),
        correlation_spike(panel, config.corr_window),
    ])
    w = np.asarray(config.drift_weights)
    defined = np.isfinite(parts)
    wsum = (defined * w).sum(axis=1)
    num = np.where(defined, parts, 0.0) @ w
    out = np.full(panel.n_dates, np.nan)
    ok = wsum > 0
    out[ok] = num[ok] / wsum[ok]
    return out


def h_disagree(panel, primary="score_primary", secondary="score_secondary"):
    """1 - Spearman(primary, secondary) per date; without a secondary model,
    |dispersion / expanding mean dispersion - 1|."""
    p = panel.column(primary)
    out = np.full(panel.n_dates, np.nan)
    if secondary is not None and secondary in panel.frame.columns:
        s = panel.column(secondary)
        for d, sl in panel.date_slices():
            m = np.isfinite(p[sl]) & np.isfinite(s[sl])
            if m.sum() < 3:
                continue
            try:
                out[d] = 1.0 - stats.spearman(p[sl][m], s[sl][m])
            except NumericalError:
                pass
        return out
    disp = np.full(panel.n_dates, np.nan)
    for d, sl in panel.date_slices():
        v = p[sl][np.isfinite(p[sl])]
        if v.size >= 2:
            disp[d] = v.std(ddof=1)
    total, count = 0.0, 0
    for t in range(panel.n_dates):
        if not np.isfinite(disp[t]):
            continue
        total += disp[t]
        count += 1
        mean = total / count
        if mean > 0:
            out[t] = abs(disp[t] / mean - 1.0)
    return out


def gate_value(H, low=0.3, high=0.7):
    """G = clip((H - low) / (high - low), 0, 1).

    Evaluated in decimal on the shortest float representation so that round
    inputs give exact outputs (H = 0.7 maps to exactly 1).
    """
    H = np.asarray(H, dtype=float)
    lo, span = Decimal(repr(float(low))), Decimal(repr(float(high))) - Decimal(repr(float(low)))
    flat = H.ravel()
    out = np.full(flat.shape, np.nan)
    for i, h in enumerate(flat):
        if np.isfinite(h):
            out[i] = float((Decimal(repr(float(h))) - lo) / span)
    return np.clip(out, 0.0, 1.0).reshape(H.shape)


def health_and_gate(real, drift, disagree, config=GateConfig()):
    """Combine component series into the gate frame indexed by calendar position.

    z-scores are expanding; an undefined z contributes 0. Positions where the
    efficacy component is undefined are undefined throughout.
    """
    real = np.asarray(real, dtype=float)
    drift = np.asarray(drift, dtype=float)
    disagree = np.asarray(disagree, dtype=float)
    z_real = stats.expanding_zscore(real)
    z_drift = stats.expanding_zscore(drift)
    z_dis = stats.expanding_zscore(disagree)
    h_raw = (np.nan_to_num(z_real) - config.alpha * np.nan_to_num(z_drift)
             - config.beta * np.nan_to_num(z_dis))
    warm = ~np.isfinite(real)
    h_raw[warm] = np.nan
    H = stats.sigmoid(h_raw)
    G = gate_value(H, config.h_low, config.h_high)
    frame = pd.DataFrame({
        "h_real": real, "h_drift": drift, "h_disagree": disagree,
        "z_real": z_real, "z_drift": z_drift, "z_disagree": z_dis,
        "h_raw": h_raw, "H": H, "G": G,
    })
    frame.loc[warm, ["h_drift", "h_disagree", "z_real", "z_drift", "z_disagree"]] = np.nan
    active = pd.Series(G >= config.theta, dtype=object)
    active[warm] = None
    frame["active"] = active
    return frame


def compute_gate(panel, horizon, config=GateConfig(), score_col="score_primary",
                 secondary_col="score_secondary"):
    """Full gate series for a panel; causal in the panel's maturation structure."""
    if config.horizon_lag != horizon:
        logger.debug("gate horizon_lag %d overridden by horizon %d", config.horizon_lag, horizon)
    ic = daily_rank_ic(panel, horizon, score_col)
    matured = matured_ic_stream(ic, horizon)
    frame = health_and_gate(
        h_real(matured, config.halflife, config.min_periods),
        h_drift(panel, config, score_col),
        h_disagree(panel, score_col, secondary_col),
        config,
    )
    frame.insert(0, "matured_ic", matured)
    frame.insert(0, "date", panel.dates)
    frame.index.name = "date_idx"
    return frame


def write_gate_csv(frame, path):
    out = frame[GATE_COLUMNS].copy()
    out["active"] = out["active"].map({True: 1, False: 0})
    out.to_csv(path, index=False, float_format="%.17g", na_rep="")


def _ordinal_buckets(values, n_buckets, tiebreak=None):
    keys = [np.arange(values.size)]
    if tiebreak is not None:
        keys.insert(0, tiebreak)
    keys.insert(0, values)
    order = np.lexsort(keys[::-1])
    b = np.empty(values.size, dtype=int)
    b[order] = np.arange(values.size) * n_buckets // values.size
    return b


def evaluate_gate(predictor, matured_ic, theta=0.2, n_buckets=4, tiebreak=None):
    """Classifier view of a per-date predictor against good days (matured IC > 0).

    Dates where either series is undefined are dropped. Buckets are
    equal-count quantile buckets of the predictor; ties are ordered by
    ``tiebreak`` (for G, pass H) then by date.
    """
    x = np.asarray(predictor, dtype=float)
    ic = np.asarray(matured_ic, dtype=float)
    tb = None if tiebreak is None else np.asarray(tiebreak, dtype=float)
    ok = np.isfinite(x) & np.isfinite(ic)
    if tb is not None:
        ok &= np.isfinite(tb)
        tb = tb[ok]
    x, ic = x[ok], ic[ok]
    good = ic > 0
    result = {"n": int(x.size), "auroc": stats.auroc(x, good)}
    act = x >= theta
    tp = int(np.sum(act & good))
    fp = int(np.sum(act & ~good))
    fn = int(np.sum(~act & good))
    tn = int(np.sum(~act & ~good))
    result["precision"] = tp / (tp + fp) if tp + fp else float("nan")
    result["recall"] = tp / (tp + fn) if tp + fn else float("nan")
    result["abstention"] = float(np.mean(~act)) if x.size else float("nan")
    result["confusion"] = {"tp": tp, "fp": fp, "fn": fn, "tn": tn}
    buckets = _ordinal_buckets(x, n_buckets, tb)
    rows = []
    for k in range(n_buckets):
        m = buckets == k
        rows.append({
            "bucket": k + 1,
            "n": int(m.sum()),
            "predictor_min": float(x[m].min()) if m.any() else float("nan"),
            "predictor_max": float(x[m].max()) if m.any() else float("nan"),
            "mean_rank_ic": float(ic[m].mean()) if m.any() else float("nan"),
            "pct_bad_days": float(np.mean(~good[m])) if m.any() else float("nan"),
        })
    result["buckets"] = rows
    means = np.array([r["mean_rank_ic"] for r in rows])
    try:
        result["bucket_spearman"] = stats.spearman(np.arange(n_buckets, dtype=float), means)
    except NumericalError:
        result["bucket_spearman"] = float("nan")
    return result


def vix_gate_baseline(stress, window=20, percentile=0.67, lookback=252, min_lookback=None,
                      ranked=False):
    """Abstain when stress exceeds its rolling percentile on more than half of
    the trailing ``window`` days. With ``ranked`` the input already is a
    trailing percentile in [0, 1] and the threshold is ``percentile`` itself.

    Returns a frame with the rolling threshold, the daily exceedance flag,
    the fraction of window days above threshold, ``active`` (False =
    abstain) and ``score = 1 - frac_above`` for ranking-based evaluation.
    """
    s = pd.Series(np.asarray(stress, dtype=float))
    min_lookback = window if min_lookback is None else min_lookback
    if ranked:
        thr = pd.Series(np.full(s.size, percentile))
    else:
        thr = s.rolling(lookback, min_periods=min_lookback).quantile(percentile, interpolation="linear")
    above = (s > thr).astype(float)
    above[thr.isna() | s.isna()] = np.nan
    frac = above.rolling(window, min_periods=window).mean()
    active = pd.Series(frac <= 0.5, dtype=object)
    active[frac.isna()] = None
    return pd.DataFrame({
        "threshold": thr.to_numpy(),
        "above": above.to_numpy(),
        "frac_above": frac.to_numpy(),
        "active": active.to_numpy(),
        "score": (1.0 - frac).to_numpy(),
    })
