"""Rolling split-conformal intervals for rank displacement.

The nonconformity score of a row is its loss divided by a normalizer
(1, vol_20d or the epistemic signal). For a date t the calibration set is
every score from the ``calib_window_days`` most recent dates whose loss has
matured by t (dates u <= t - horizon, and u < t). The interval for a row is
[0, min(q * normalizer, 1)] with q the ceil((n + 1) * nominal)-th smallest
calibration score.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

NORMALIZERS = ("raw", "vol", "deup_oracle", "deup_pit")
INTERVAL_COLUMNS = ["date", "asset", "normalizer", "q", "width", "loss", "covered"]


@dataclass(frozen=True)
class ConformalConfig:
    normalizer: str = "raw"
    nominal: float = 0.90
    calib_window_days: int = 60
    min_scores: int = 30
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.normalizer not in NORMALIZERS:
            raise ConfigError(f"unknown normalizer {self.normalizer!r}")
        if not 0.0 < self.nominal < 1.0:
            raise ConfigError("nominal must lie in (0, 1)")
        if self.calib_window_days < 10:
            raise ConfigError("calibration window must cover at least 10 dates")


def nonconformity(loss, norm=None, epsilon=1e-6):
    """loss / max(norm, eps); the raw score when ``norm`` is None."""
    loss = np.asarray(loss, dtype=float)
    if norm is None:
        return loss.copy()
    return loss / np.maximum(np.asarray(norm, dtype=float), epsilon)


def conformal_quantile(scores, nominal):
    """ceil((n + 1) * nominal)-th order statistic; inf when that exceeds n."""
    s = np.sort(np.asarray(scores, dtype=float))
    n = s.size
    k = math.ceil((n + 1) * nominal)
    if k > n:
        return float("inf")
    return float(s[k - 1])


def normalizer_column(config):
    return {"raw": None, "vol": "vol_20d", "deup_oracle": "e_oracle", "deup_pit": "e_pit"}[config.normalizer]


def predict_intervals(table, config, horizon):
    """Intervals for every row of ``table`` that has enough calibration history.

    ``table`` needs date_idx, date, asset, rank_loss and the normalizer
    column. Rows with an undefined loss or normalizer neither calibrate nor
    receive an interval.
    """
    col = normalizer_column(config)
    loss = table["rank_loss"].to_numpy(dtype=float)
    norm = np.ones(len(table)) if col is None else table[col].to_numpy(dtype=float)
    ok = np.isfinite(loss) & np.isfinite(norm)
    scores = nonconformity(loss, None if col is None else norm, config.epsilon)
    d = table["date_idx"].to_numpy()
    by_date = {}
    for u in np.unique(d[ok]):
        by_date[int(u)] = np.sort(scores[ok & (d == u)])
    rows = []
    for t in sorted(by_date):
        hi = min(t - horizon, t - 1)
        lo = hi - config.calib_window_days + 1
        window = [by_date[u] for u in range(max(lo, 0), hi + 1) if u in by_date]
        calib = np.concatenate(window) if window else np.empty(0)
        if calib.size < config.min_scores:
            continue
        q = conformal_quantile(calib, config.nominal)
        idx = np.flatnonzero(ok & (d == t))
        width = np.minimum(q * norm[idx], 1.0) if np.isfinite(q) else np.ones(idx.size)
        rows.append(pd.DataFrame({
            "row": table.index.to_numpy()[idx],
            "date_idx": t,
            "q": q,
            "width": width,
            "loss": loss[idx],
            "n_calib": calib.size,
        }))
    if not rows:
        return pd.DataFrame(columns=["date", "date_idx", "asset", "normalizer", "q", "width", "loss",
                                     "covered", "n_calib"])
    out = pd.concat(rows, ignore_index=True)
    out["covered"] = out["loss"] <= out["width"]
    out["normalizer"] = config.normalizer
    src = table.loc[out["row"].to_numpy()]
    out["date"] = src["date"].to_numpy()
    out["asset"] = src["asset"].to_numpy()
    return out.set_index("row")


def _terciles(v):
    order = np.argsort(v, kind="mergesort")
    b = np.empty(v.size, dtype=int)
    b[order] = np.arange(v.size) * 3 // v.size
    return b


def coverage_report(intervals, tercile_signal, min_rows=300):
    """Marginal and per-tercile coverage; terciles by pooled ``tercile_signal``
    (aligned with ``intervals`` rows)."""
    covered = intervals["covered"].to_numpy(dtype=bool)
    sig = np.asarray(tercile_signal, dtype=float)
    ok = np.isfinite(sig)
    if ok.sum() < min_rows:
        raise DataError(f"coverage report needs at least {min_rows} rows, got {int(ok.sum())}")
    covered, sig = covered[ok], sig[ok]
    width = intervals["width"].to_numpy(dtype=float)[ok]
    b = _terciles(sig)
    per = [float(covered[b == k].mean()) for k in range(3)]
    return {
        "n": int(covered.size),
        "marginal": float(covered.mean()),
        "terciles": per,
        "spread": float(max(per) - min(per)),
        "mean_width": float(width.mean()),
    }


def write_intervals_csv(intervals, path):
    out = intervals[INTERVAL_COLUMNS].copy()
    out["covered"] = out["covered"].astype(int)
    out.to_csv(path, index=False, float_format="%.17g")
