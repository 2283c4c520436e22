"""Non-overlapping long/short simulation and performance metrics.

Accounting per rebalance period:

    turnover = 0.5 * sum |w_new - w_old|
    cost     = cost_bps / 1e4 * 2 * turnover     (total traded notional)
    gross    = sum w * r_forward
    net      = gross - cost

An abstained period holds cash: gross, cost and net are zero and the book is
flattened, so the next active period pays the full build turnover.
"""
import json
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import UndefinedSharpe
from .panel import return_column

logger = logging.getLogger(__name__)

COST_CONVENTION = "cost = cost_bps/1e4 * 2 * turnover; turnover = 0.5 * sum|w_new - w_old|"
PATH_COLUMNS = ["date", "gross", "turnover", "cost", "net", "abstained"]
PERF_FIELDS = ("sharpe_ann", "sortino_ann", "max_dd", "calmar", "ann_return", "cagr", "ann_vol",
               "hit_rate", "win_loss", "best", "worst", "mean_turnover", "median_turnover",
               "crisis_max_dd")


def monthly_rebalance_dates(dates, first=0, last=None):
    """Calendar positions of the first trading day of each month within [first, last]."""
    last = len(dates) - 1 if last is None else last
    out, prev = [], None
    for i in range(first, last + 1):
        month = dates[i][:7]
        if month != prev:
            out.append(i)
            prev = month
    return np.array(out, dtype=int)


@dataclass
class PortfolioPath:
    frame: pd.DataFrame  # date, date_idx, gross, turnover, cost, net, abstained
    cost_bps: float
    horizon: int

    @property
    def net(self):
        return self.frame["net"].to_numpy(dtype=float)

    @property
    def turnover(self):
        return self.frame["turnover"].to_numpy(dtype=float)

    @property
    def abstention(self):
        return float(self.frame["abstained"].mean()) if len(self.frame) else 0.0


def _returns_lookup(panel, horizon):
    ret = panel.column(return_column(horizon))
    assets = panel.frame["asset"].to_numpy()
    out = {}
    for d, sl in panel.date_slices():
        out[d] = dict(zip(assets[sl], ret[sl]))
    return out


def simulate(weights, panel, horizon=20, cost_bps=10.0, abstained=None):
    """Simulate a rebalance ledger.

    ``weights`` maps date_idx -> Series(asset -> weight) in rebalance order
    (an empty Series is a flat book). ``abstained`` optionally maps date_idx
    to True for cash periods.
    """
    lookup = _returns_lookup(panel, horizon)
    abstained = abstained or {}
    rows = []
    prev = pd.Series(dtype=float)
    for d in sorted(weights):
        w = weights[d]
        if abstained.get(d, False):
            rows.append((panel.dates[d], d, 0.0, 0.0, 0.0, 0.0, True))
            prev = pd.Series(dtype=float)
            continue
        union = prev.index.union(w.index)
        delta = w.reindex(union, fill_value=0.0) - prev.reindex(union, fill_value=0.0)
        turnover = 0.5 * float(np.abs(delta.to_numpy()).sum())
        cost = cost_bps / 1e4 * 2.0 * turnover
        gross = 0.0
        ret = lookup.get(d, {})
        for asset, wi in zip(w.index, w.to_numpy()):
            r = ret.get(asset, np.nan)
            if not np.isfinite(r):
                warnings.warn(f"{panel.dates[d]}: no forward return for {asset}; position contributes 0")
                continue
            gross += wi * r
        rows.append((panel.dates[d], d, gross, turnover, cost, gross - cost, False))
        prev = w
    frame = pd.DataFrame(rows, columns=["date", "date_idx", "gross", "turnover", "cost", "net", "abstained"])
    if frame["abstained"].any():
        warnings.warn("gated portfolio abstains on some periods; not directly comparable to ungated baselines")
    return PortfolioPath(frame, float(cost_bps), int(horizon))


def simulate_policy(result, panel, horizon=20, cost_bps=10.0):
    flags = {int(d): bool(a) for d, a in zip(result.rebalance_dates, result.abstained)}
    return simulate(result.weights(), panel, horizon, cost_bps, flags)


def _max_drawdown(r):
    wealth = np.cumprod(1.0 + r)
    peak = np.maximum.accumulate(np.concatenate([[1.0], wealth]))[1:]
    return float(min(0.0, np.min(wealth / peak - 1.0)))


def perf_report(returns, turnover=None, crisis_mask=None, periods_per_year=12, allow_undefined=False):
    """Metric suite over a monthly return series.

    Raises UndefinedSharpe for fewer than two returns or zero variance
    unless ``allow_undefined`` (then the undefined fields are NaN).
    """
    r = np.asarray(returns, dtype=float)
    n = r.size
    nan = float("nan")
    ann = math.sqrt(periods_per_year)
    if n < 2:
        if not allow_undefined:
            raise UndefinedSharpe(f"need at least 2 returns, got {n}")
        return {k: nan for k in PERF_FIELDS}
    mean = float(r.mean())
    sd = float(r.std(ddof=1))
    if sd == 0.0 and not allow_undefined:
        raise UndefinedSharpe("zero return variance")
    downside = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    max_dd = _max_drawdown(r)
    growth = float(np.prod(1.0 + r))
    cagr = growth ** (periods_per_year / n) - 1.0 if growth > 0 else -1.0
    wins, losses = r[r > 0], r[r < 0]
    out = {
        "sharpe_ann": mean / sd * ann if sd > 0 else nan,
        "sortino_ann": mean / downside * ann if downside > 0 else nan,
        "max_dd": max_dd,
        "calmar": cagr / abs(max_dd) if max_dd < 0 else nan,
        "ann_return": mean * periods_per_year,
        "cagr": cagr,
        "ann_vol": sd * ann,
        "hit_rate": float(np.mean(r > 0)),
        "win_loss": float(wins.mean() / abs(losses.mean())) if wins.size and losses.size else nan,
        "best": float(r.max()),
        "worst": float(r.min()),
        "mean_turnover": nan,
        "median_turnover": nan,
        "crisis_max_dd": nan,
    }
    if turnover is not None:
        t = np.asarray(turnover, dtype=float)
        out["mean_turnover"] = float(t.mean())
        out["median_turnover"] = float(np.median(t))
    if crisis_mask is not None:
        m = np.asarray(crisis_mask, dtype=bool)
        if m.any():
            out["crisis_max_dd"] = _max_drawdown(r[m])
    return out


def path_report(path, crisis=None, allow_undefined=True):
    """perf_report for a simulated path; ``crisis`` is an inclusive (start, end) ISO date pair."""
    mask = None
    if crisis is not None:
        d = path.frame["date"]
        mask = ((d >= crisis[0]) & (d <= crisis[1])).to_numpy()
    rep = perf_report(path.net, path.turnover, mask, allow_undefined=allow_undefined)
    rep["abstention"] = path.abstention
    rep["n_periods"] = int(len(path.frame))
    rep["cost_bps"] = path.cost_bps
    rep["cost_convention"] = COST_CONVENTION
    return rep


def write_path_csv(path, out):
    frame = path.frame[PATH_COLUMNS].copy()
    frame["abstained"] = frame["abstained"].astype(int)
    frame.to_csv(out, index=False, float_format="%.17g")


def clean_json(obj):
    """Recursively convert numpy scalars and arrays to plain types; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean_json(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_report_json(report, out, config=None):
    payload = {"report": report}
    if config is not None:
        payload["config"] = config
    with open(out, "w") as fh:
        json.dump(clean_json(payload), fh, indent=1, sort_keys=True)
        fh.write("\n")
