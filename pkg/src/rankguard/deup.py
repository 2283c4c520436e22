"""Error predictor g(x), aleatoric floors a(t) and the epistemic signal.

g(x) is a gradient-boosted regressor trained walk-forward on realized rank
displacement. The aleatoric floor estimates the irreducible part of that
displacement; the epistemic signal is what g predicts beyond the floor,
``e = max(0, g - a)``.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import gbt, stats
from .errors import ConfigError, DataError, NumericalError
from .panel import return_column

logger = logging.getLogger(__name__)

GX_FEATURES = (
    "score",
    "abs_score",
    "cross_sectional_rank",
    "vol_20d",
    "vol_60d",
    "mom_1m",
    "adv_20d",
    "vix_percentile_252d",
    "market_regime_enc",
    "market_vol_21d",
    "market_return_21d",
)
TIER2_FEATURES = ("vol_20d", "adv_20d", "market_vol_21d", "vix_percentile_252d", "mom_1m", "sector_enc")
ALEATORIC_MODES = ("oracle", "pit_rolling", "expanding", "tier0_iqr", "tier2_quantile")
PREDICTION_COLUMNS = ["date", "asset", "horizon", "g", "a_oracle", "a_pit", "a_exp",
                      "e_oracle", "e_pit", "rank_loss"]


@dataclass(frozen=True)
class AleatoricConfig:
    mode: str = "pit_rolling"
    window: int = 60
    quantile_level: float = 0.10
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.mode not in ALEATORIC_MODES:
            raise ConfigError(f"unknown aleatoric mode {self.mode!r}")
        if self.window < 1:
            raise ConfigError("window must be positive")
        if not 0.0 < self.quantile_level < 1.0:
            raise ConfigError("quantile_level must lie in (0, 1)")


def build_gx_features(panel, scores=None, rows=None):
    """Feature matrix for g(x): 11 columns in fixed order, missing -> 0."""
    frame = panel.frame if rows is None else panel.frame.iloc[rows]
    if scores is None:
        score = frame["score_primary"].to_numpy(dtype=float)
    else:
        score = np.asarray(scores, dtype=float)
        if score.size != len(frame):
            raise DataError(f"{score.size} scores for {len(frame)} rows")
    cols = {"score": score, "abs_score": np.abs(score)}
    for name in GX_FEATURES[2:]:
        if name in frame.columns:
            cols[name] = frame[name].to_numpy(dtype=float)
        else:
            cols[name] = np.zeros(len(frame))
    X = pd.DataFrame(cols, index=frame.index, columns=list(GX_FEATURES))
    return X.fillna(0.0)


def train_gx_walkforward(panel, labels, folds, gbt_config=gbt.GbtConfig()):
    """Walk-forward g predictions for every row of each emitting fold.

    ``labels`` is the output of ``make_rank_labels`` for one horizon. Returns
    a frame indexed by panel row with columns ``g`` and ``fold_id``; rows in
    non-emitting folds are absent.
    """
    date_idx = panel.frame["date_idx"].to_numpy()
    label_dates = labels["date_idx"].to_numpy()
    label_rows = labels.index.to_numpy()
    loss = labels["rank_loss"].to_numpy(dtype=float)
    X_all = build_gx_features(panel)
    pieces = []
    for plan in folds:
        if not plan.emits_predictions:
            continue
        train = np.isin(label_dates, plan.train_dates)
        if not train.any():
            warnings.warn(f"fold {plan.fold_id}: empty training set, skipped")
            continue
        limit = plan.max_train_maturation()
        if limit is not None and limit + plan.embargo_days > plan.predict_start:
            raise DataError(f"fold {plan.fold_id}: training labels leak into the embargo")
        model = gbt.fit(X_all.iloc[label_rows[train]].to_numpy(), loss[train], gbt_config,
                        feature_names=list(GX_FEATURES))
        rows = np.flatnonzero(np.isin(date_idx, plan.predict_dates))
        g = gbt.predict(model, X_all.iloc[rows].to_numpy())
        pieces.append(pd.DataFrame({"g": np.clip(g, 0.0, 1.0), "fold_id": plan.fold_id}, index=rows))
        logger.info("fold %d: trained on %d rows, predicted %d", plan.fold_id, int(train.sum()), rows.size)
    if not pieces:
        return pd.DataFrame({"g": pd.Series(dtype=float), "fold_id": pd.Series(dtype=int)})
    return pd.concat(pieces)


def _per_date_losses(labels, n_dates):
    out = [np.empty(0)] * n_dates
    for d, grp in labels.groupby("date_idx", sort=True)["rank_loss"]:
        out[int(d)] = np.sort(grp.to_numpy(dtype=float))
    return out


def _cross_sectional_iqr(panel, horizon):
    ret = panel.column(return_column(horizon))
    out = np.full(panel.n_dates, np.nan)
    for d, sl in panel.date_slices():
        r = ret[sl][np.isfinite(ret[sl])]
        if r.size >= 2:
            out[d] = np.quantile(r, 0.75) - np.quantile(r, 0.25)
    return out


def calibrate_tier0(iqr, labels, dev_dates, epsilon=1e-6, tol=1e-10):
    """Constant c such that median of c/(IQR+eps) over DEV rows matches DEV median loss.

    Solved by bisection; c/(IQR+eps) is linear in c so the bracket always closes.
    """
    dev = labels[np.isin(labels["date_idx"], dev_dates)]
    if dev.empty:
        raise DataError("no DEV labels for tier-0 calibration")
    inv = 1.0 / (iqr[dev["date_idx"].to_numpy()] + epsilon)
    inv = inv[np.isfinite(inv)]
    target = float(np.median(dev["rank_loss"]))
    lo, hi = 0.0, 1.0
    while np.median(hi * inv) < target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.median(mid * inv) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def aleatoric_baseline(labels, config, n_dates, horizon, panel=None, dev_dates=None):
    """Per-date floor a(t) as a float array over calendar positions (NaN = undefined).

    oracle       P_q of the same date's losses
    pit_rolling  P_q of losses pooled over dates in [t - horizon - W, t - horizon]
    expanding    median of per-date P_q over dates u <= t - horizon
    tier0_iqr    c / (IQR of date-t forward returns + eps), c fit on DEV
    """
    q = config.quantile_level
    losses = _per_date_losses(labels, n_dates)
    per_date_q = np.array([np.quantile(v, q) if v.size else np.nan for v in losses])
    out = np.full(n_dates, np.nan)
    if config.mode == "oracle":
        return per_date_q
    if config.mode == "pit_rolling":
        W = config.window
        if W < horizon:
            logger.warning("PIT window %d shorter than horizon %d", W, horizon)
        for t in range(n_dates):
            hi = t - horizon
            if hi < 0:
                continue
            pooled = [losses[u] for u in range(max(0, hi - W), hi + 1) if losses[u].size]
            if pooled:
                out[t] = np.quantile(np.concatenate(pooled), q)
        return out
    if config.mode == "expanding":
        seen = []
        for t in range(n_dates):
            hi = t - horizon
            if hi >= 0 and np.isfinite(per_date_q[hi]):
                seen.append(per_date_q[hi])
            if seen:
                out[t] = np.median(seen)
        return out
    if config.mode == "tier0_iqr":
        if panel is None or dev_dates is None:
            raise ConfigError("tier0_iqr needs the panel and DEV dates")
        iqr = _cross_sectional_iqr(panel, horizon)
        c = calibrate_tier0(iqr, labels, dev_dates, config.epsilon)
        logger.info("tier-0 constant c = %.6g", c)
        return c / (iqr + config.epsilon)
    raise ConfigError("tier2_quantile is a per-row floor; use tier2_quantile_baseline")


def tier2_quantile_baseline(panel, folds, horizon, gbt_config=gbt.GbtConfig(n_estimators=30)):
    """Per-row aleatoric width: predicted IQR of the forward return from
    walk-forward pinball regressors at 0.25 and 0.75 (diagnostic only)."""
    ret = panel.column(return_column(horizon))
    X = np.column_stack([np.nan_to_num(panel.column(c)) for c in TIER2_FEATURES])
    date_idx = panel.frame["date_idx"].to_numpy()
    out = np.full(len(panel.frame), np.nan)
    for plan in folds:
        if not plan.emits_predictions:
            continue
        train = np.isin(date_idx, plan.train_dates) & np.isfinite(ret)
        if not train.any():
            continue
        rows = np.isin(date_idx, plan.predict_dates)
        bands = []
        for level in (0.25, 0.75):
            cfg = gbt.GbtConfig(**{**gbt_config.__dict__, "loss": "pinball", "quantile": level})
            bands.append(gbt.predict(gbt.fit(X[train], ret[train], cfg), X[rows]))
        out[rows] = np.maximum(bands[1] - bands[0], 0.0)
    return out


def epistemic(g, a):
    """max(0, g - a); NaN wherever either input is undefined."""
    g = np.asarray(g, dtype=float)
    a = np.asarray(a, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.maximum(0.0, g - a)
    out[~(np.isfinite(g) & np.isfinite(a))] = np.nan
    return out


def uncertainty_table(panel, horizon, g_frame, labels, floors):
    """Join predictions, per-date floors and realized losses.

    ``floors`` maps a suffix (``oracle``, ``pit``, ``exp``) to a per-date
    array. Unlabeled rows keep NaN loss.
    """
    rows = g_frame.index.to_numpy()
    frame = panel.frame
    d = frame["date_idx"].to_numpy()[rows]
    out = pd.DataFrame({
        "date": frame["date"].to_numpy()[rows],
        "date_idx": d,
        "asset": frame["asset"].to_numpy()[rows],
        "horizon": int(horizon),
        "score": frame["score_primary"].to_numpy(dtype=float)[rows],
        "g": g_frame["g"].to_numpy(dtype=float),
        "fold_id": g_frame["fold_id"].to_numpy(),
    }, index=rows)
    for key in ("oracle", "pit", "exp"):
        floor = floors.get(key)
        a = np.full(rows.size, np.nan) if floor is None else np.asarray(floor, dtype=float)[d]
        out[f"a_{key}"] = a
        out[f"e_{key}"] = epistemic(out["g"].to_numpy(), a)
    out["rank_loss"] = labels["rank_loss"].reindex(rows).to_numpy(dtype=float)
    return out.sort_index()


def write_prediction_table(table, path):
    t = table[PREDICTION_COLUMNS]
    t.to_csv(path, index=False, float_format="%.17g", na_rep="")


def quintile_table(ehat, loss, per_date=False, date_idx=None):
    """Mean loss by quintile of the epistemic signal.

    Pooled quintiles by default (stable ordinal ranks, so ties split by row
    order); ``per_date`` assigns quintiles within each date instead.
    """
    ehat = np.asarray(ehat, dtype=float)
    loss = np.asarray(loss, dtype=float)
    ok = np.isfinite(ehat) & np.isfinite(loss)
    if ok.sum() < 50:
        raise DataError(f"quintile table needs at least 50 rows, got {int(ok.sum())}")
    e, ell = ehat[ok], loss[ok]

    def assign(v):
        order = np.argsort(v, kind="mergesort")
        q = np.empty(v.size, dtype=int)
        q[order] = np.arange(v.size) * 5 // v.size
        return q

    if per_date:
        if date_idx is None:
            raise ConfigError("per-date quintiles need date_idx")
        d = np.asarray(date_idx)[ok]
        bucket = np.empty(e.size, dtype=int)
        for u in np.unique(d):
            m = d == u
            bucket[m] = assign(e[m])
    else:
        bucket = assign(e)
    means = np.array([ell[bucket == k].mean() for k in range(5)])
    try:
        rho = stats.spearman(np.arange(5.0), means)
    except NumericalError:
        rho = float("nan")
    ratio = means[4] / means[0] if means[0] > 0 else float("inf")
    return {"means": means.tolist(), "q5_q1": float(ratio), "spearman": rho, "n": int(e.size)}


def per_date_spearman(frame, x_col, y_col, min_rows=3):
    """Per-date Spearman correlations; constant or thin dates are skipped."""
    out = {}
    for d, grp in frame.groupby("date_idx", sort=True):
        x = grp[x_col].to_numpy(dtype=float)
        y = grp[y_col].to_numpy(dtype=float)
        m = np.isfinite(x) & np.isfinite(y)
        if m.sum() < min_rows:
            continue
        try:
            out[int(d)] = stats.spearman(x[m], y[m])
        except NumericalError:
            continue
    return pd.Series(out, dtype=float)


def coupling_series(frame, ehat_col="e_pit", score_col="score"):
    """Per-date rho(e, |score|) with summary median and fraction positive."""
    tmp = frame[["date_idx", ehat_col]].copy()
    tmp["abs_score"] = np.abs(frame[score_col].to_numpy(dtype=float))
    rho = per_date_spearman(tmp, ehat_col, "abs_score")
    return {
        "series": rho,
        "median": float(rho.median()) if rho.size else float("nan"),
        "frac_positive": float((rho > 0).mean()) if rho.size else float("nan"),
    }


def residualize_ehat(ehat, covariates, date_idx=None):
    """OLS residual of e on covariates; per date when ``date_idx`` is given."""
    ehat = np.asarray(ehat, dtype=float)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if date_idx is None:
        return stats.ols_residualize(ehat, X)
    date_idx = np.asarray(date_idx)
    out = np.empty_like(ehat)
    for u in np.unique(date_idx):
        m = date_idx == u
        out[m] = stats.ols_residualize(ehat[m], X[m])
    return out


def baseline_dominance_table(frame, candidates, loss_col="rank_loss", period_col=None):
    """Mean per-date Spearman of each candidate signal with realized loss.

    ``candidates`` maps a display name to a column of ``frame``. Returns a
    frame with one row per candidate and one column per period (or ``ALL``).
    """
    groups = [("ALL", frame)] if period_col is None else list(frame.groupby(period_col, sort=True))
    table = {}
    for name, col in candidates.items():
        table[name] = {str(p): float(per_date_spearman(sub, col, loss_col).mean()) for p, sub in groups}
    return pd.DataFrame(table).T
