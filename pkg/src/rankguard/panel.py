"""Dated cross-sectional panel, rank-displacement labels and walk-forward folds.

The trading calendar is simply the sorted set of distinct dates found in the
data; ``date_idx`` is a row's position on that calendar and every lag or
maturation offset in the package is counted in those positions.
"""
import csv
import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import stats
from .errors import ConfigError, DuplicateKey, EmptyTrainSet, IngestError

logger = logging.getLogger(__name__)

FEATURES = (
    "mom_1m",
    "mom_3m",
    "mom_12m",
    "vol_20d",
    "vol_60d",
    "adv_20d",
    "cross_sectional_rank",
    "vix_percentile_252d",
    "market_regime_enc",
    "market_vol_21d",
    "market_return_21d",
    "sector_enc",
)
SCORES = ("score_primary", "score_secondary")
# trailing one-day return realized at the row's date; feeds the correlation
# spike component of the drift monitor
DAILY_RETURN = "ret_1d"
HORIZONS = (20, 60, 90)
KEY = ("date", "asset")


def return_column(horizon):
    return f"ret_{int(horizon)}"


def default_columns(horizons=HORIZONS):
    return list(KEY) + list(FEATURES) + list(SCORES) + [DAILY_RETURN] + [
        return_column(h) for h in horizons
    ]


@dataclass
class Panel:
    """Immutable long-format panel sorted by (date, asset).

    ``frame`` holds one row per (date, asset) with string ``date`` (ISO-8601)
    and ``asset`` columns, numeric columns for everything else, and a derived
    integer ``date_idx``.
    """

    frame: pd.DataFrame
    dates: list = field(default_factory=list)

    @classmethod
    def from_frame(cls, frame):
        frame = frame.copy()
        frame["date"] = frame["date"].astype(str)
        frame["asset"] = frame["asset"].astype(str)
        frame = frame.sort_values(list(KEY), kind="mergesort").reset_index(drop=True)
        dates = sorted(frame["date"].unique().tolist())
        lookup = {d: i for i, d in enumerate(dates)}
        frame["date_idx"] = frame["date"].map(lookup).astype(np.int64)
        return cls(frame=frame, dates=dates)

    @property
    def n_dates(self):
        return len(self.dates)

    @property
    def horizons(self):
        out = []
        for c in self.frame.columns:
            if c.startswith("ret_") and c != DAILY_RETURN:
                out.append(int(c[4:]))
        return sorted(out)

    @property
    def data_columns(self):
        return [c for c in self.frame.columns if c != "date_idx"]

    def column(self, name):
        if name in self.frame.columns:
            return self.frame[name].to_numpy(dtype=float)
        return np.full(len(self.frame), np.nan)

    def date_slices(self):
        """Yield (date_idx, row slice) pairs; rows are contiguous per date."""
        idx = self.frame["date_idx"].to_numpy()
        bounds = np.flatnonzero(np.diff(idx)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [idx.size]])
        for s, e in zip(starts, ends):
            yield int(idx[s]), slice(int(s), int(e))

    def truncate(self, last_idx, mask_unmatured=True):
        """Prefix of the panel up to ``last_idx`` as seen on that date.

        With ``mask_unmatured`` forward returns that would not have matured by
        ``last_idx`` are blanked, so the result contains only information
        available at the truncation date.
        """
        frame = self.frame[self.frame["date_idx"] <= last_idx].copy()
        if mask_unmatured:
            for h in self.horizons:
                col = return_column(h)
                frame.loc[frame["date_idx"] + h > last_idx, col] = np.nan
        return Panel.from_frame(frame.drop(columns="date_idx"))


def _parse_float(text, column, line):
    text = text.strip()
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"column {column!r}: cannot parse {text!r} as a number", line)


def ingest_csv(path, schema=None):
    """Read a panel CSV.

    ``schema`` is an optional list of required column names; by default only
    ``date``, ``asset`` and ``score_primary`` are required and any other
    column is read as numeric. Empty cells are missing values.
    """
    required = list(schema) if schema is not None else ["date", "asset", "score_primary"]
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc.strerror}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("empty file", 1)
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestError(f"header lacks required columns {missing}", 1)
        if len(set(header)) != len(header):
            raise IngestError("header contains duplicate column names", 1)
        numeric = [c for c in header if c not in KEY]
        records = {c: [] for c in header}
        seen = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} fields, found {len(row)}", line)
            cells = dict(zip(header, row))
            date = cells["date"].strip()
            try:
                dt.date.fromisoformat(date)
            except ValueError:
                raise IngestError(f"invalid ISO-8601 date {date!r}", line)
            asset = cells["asset"].strip()
            if not asset:
                raise IngestError("empty asset id", line)
            key = (date, asset)
            if key in seen:
                raise DuplicateKey(f"duplicate key {key} (first seen on line {seen[key]})", line)
            seen[key] = line
            records["date"].append(date)
            records["asset"].append(asset)
            for c in numeric:
                records[c].append(_parse_float(cells[c], c, line))
    frame = pd.DataFrame({c: records[c] for c in header})
    for c in numeric:
        frame[c] = frame[c].astype(float)
    return Panel.from_frame(frame)


def _format_cell(value):
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return repr(float(value))


def write_csv(panel, path, columns=None):
    """Export in the ingest format; floats use shortest round-trip repr."""
    columns = columns or panel.data_columns
    frame = panel.frame
    arrays = [frame[c].tolist() for c in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in zip(*arrays):
            writer.writerow([_format_cell(v) for v in row])


def make_rank_labels(panel, horizon, score_col="score_primary"):
    """Rank-displacement labels for one horizon.

    Ranks are computed within each date over the subset of rows that carry
    both a score and a matured forward return; unlabeled rows are dropped.
    Returns a frame with columns date, date_idx, asset, horizon, score,
    fwd_return, score_rank, return_rank, rank_loss.
    """
    frame = panel.frame
    ret = panel.column(return_column(horizon))
    score = panel.column(score_col)
    ok = np.isfinite(ret) & np.isfinite(score)
    pieces = []
    for d, sl in panel.date_slices():
        m = ok[sl]
        n = int(m.sum())
        if n < 2:
            if n or m.size:
                logger.debug("date %s: %d labeled rows at horizon %d, skipped", panel.dates[d], n, horizon)
            continue
        s = score[sl][m]
        r = ret[sl][m]
        s_rank = stats.percentile_rank(s)
        r_rank = stats.percentile_rank(r)
        rows = np.flatnonzero(m) + sl.start
        pieces.append((rows, s, r, s_rank, r_rank))
    if not pieces:
        return pd.DataFrame(
            columns=["date", "date_idx", "asset", "horizon", "score", "fwd_return",
                     "score_rank", "return_rank", "rank_loss"]
        )
    rows = np.concatenate([p[0] for p in pieces])
    s_rank = np.concatenate([p[3] for p in pieces])
    r_rank = np.concatenate([p[4] for p in pieces])
    out = pd.DataFrame({
        "date": frame["date"].to_numpy()[rows],
        "date_idx": frame["date_idx"].to_numpy()[rows],
        "asset": frame["asset"].to_numpy()[rows],
        "horizon": int(horizon),
        "score": np.concatenate([p[1] for p in pieces]),
        "fwd_return": np.concatenate([p[2] for p in pieces]),
        "score_rank": s_rank,
        "return_rank": r_rank,
        "rank_loss": np.abs(r_rank - s_rank),
    })
    out.index = rows
    return out


@dataclass(frozen=True)
class FoldPlan:
    fold_id: int
    train_dates: np.ndarray  # date indices whose labels are usable for training
    predict_dates: np.ndarray
    embargo_days: int
    horizon: int
    emits_predictions: bool

    @property
    def predict_start(self):
        return int(self.predict_dates[0])

    def max_train_maturation(self):
        if self.train_dates.size == 0:
            return None
        return int(self.train_dates[-1]) + self.horizon


def walk_forward_folds(n_dates, n_folds, embargo_days, horizon, min_train_folds=0):
    """Expanding-window folds over ``n_dates`` calendar positions.

    Dates are split into ``n_folds`` chronological chunks of (near) equal
    count. Fold k predicts chunk k and trains on earlier chunks, keeping only
    dates whose label matures at least ``embargo_days`` before the first
    predict date; labels maturing inside that gap are purged. Folds with fewer
    than ``min_train_folds`` earlier chunks emit no predictions.
    """
    if isinstance(n_dates, (list, tuple, np.ndarray, pd.Index)):
        n_dates = len(n_dates)
    if n_folds < 1 or n_dates < n_folds:
        raise ConfigError(f"cannot cut {n_dates} dates into {n_folds} folds")
    if embargo_days < 0 or horizon < 0:
        raise ConfigError("embargo_days and horizon must be non-negative")
    chunks = np.array_split(np.arange(n_dates), n_folds)
    plans = []
    for k, chunk in enumerate(chunks, start=1):
        start = int(chunk[0])
        earlier = np.arange(start)
        train = earlier[earlier + horizon + embargo_days <= start]
        plans.append(
            FoldPlan(
                fold_id=k,
                train_dates=train,
                predict_dates=chunk,
                embargo_days=int(embargo_days),
                horizon=int(horizon),
                emits_predictions=(k - 1) >= min_train_folds,
            )
        )
    emitting = [p for p in plans if p.emits_predictions]
    if emitting and all(p.train_dates.size == 0 for p in emitting):
        raise EmptyTrainSet(
            f"embargo of {embargo_days} days plus horizon {horizon} leaves no training data"
        )
    return plans


def period_mask(panel_or_dates, dev_end):
    """Boolean array over calendar positions: True for DEV (date <= dev_end)."""
    dates = panel_or_dates.dates if isinstance(panel_or_dates, Panel) else panel_or_dates
    return np.array([d <= str(dev_end) for d in dates])
