"""Seeded synthetic panels with scripted signal-efficacy regimes.

Each date draws forward excess returns from a Gaussian copula on the score
ranks: the latent return is ``b * z + noise_scale * s * eta`` where ``z`` is
the normal score of the asset's score rank and ``s`` grows with distance from
the median rank (extreme ranks are noisier). The loading ``b`` is solved so
that the expected Spearman correlation between score and return equals the
segment's ``target_ic``.

Market features come from a simulated daily return panel; a latent VIX-like
series follows each segment's ``stress_level`` and is independent of
``target_ic`` unless ``stress_follows_efficacy`` is set.
"""
import datetime as dt
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy.special import ndtri
from scipy.stats import rankdata

from . import stats
from .errors import GenerationError
from .panel import DAILY_RETURN, HORIZONS, Panel, return_column

# bound on the score loading in units of the (scaled) return noise
MAX_LOADING = 10.0
CALIBRATION_DRAWS = 4000
CALIBRATION_SEED = 20240229
BURN_IN = 260
N_SECTORS = 10


@dataclass(frozen=True)
class Segment:
    """One regime; its length is either ``n_dates`` business days or the
    inclusive ``start_date``..``end_date`` range."""

    n_dates: int = None
    target_ic: float = 0.0
    noise_scale: float = 1.0
    stress_level: float = 0.3
    start_date: str = None
    end_date: str = None


@dataclass
class RegimeScript:
    segments: list
    universe_size: int = 60
    seed: int = 0
    start_date: str = "2016-01-04"
    horizons: tuple = HORIZONS
    heteroscedasticity: float = 1.5
    score_persistence: float = 0.97
    score_noise: float = 0.3
    disagree_base: float = 0.3
    disagree_sensitivity: float = 1.5
    stress_follows_efficacy: bool = False
    stress_persistence: float = 0.7

    def __post_init__(self):
        try:
            segs = [s if isinstance(s, Segment) else Segment(**s) for s in self.segments]
        except TypeError as exc:
            raise GenerationError(f"bad segment specification: {exc}")
        self.horizons = tuple(int(h) for h in self.horizons)
        if not segs:
            raise GenerationError("script has no segments")
        self.segments = self._resolve_dates(segs)
        if self.universe_size < 20:
            raise GenerationError("universe_size must be at least 20")
        for s in self.segments:
            if s.n_dates is None or s.n_dates < 1:
                raise GenerationError("segments must contain at least one date")
            if not -1.0 <= s.target_ic <= 1.0:
                raise GenerationError(f"target_ic {s.target_ic} outside [-1, 1]")
            if s.noise_scale <= 0:
                raise GenerationError("noise_scale must be positive")
            if not 0.0 <= s.stress_level <= 1.0:
                raise GenerationError("stress_level must lie in [0, 1]")

    def _resolve_dates(self, segs):
        """Turn dated segments into business-day counts; dated segments must
        be contiguous and start on the script's first date."""
        dated = [s.start_date is not None or s.end_date is not None for s in segs]
        if not any(dated):
            return segs
        if not all(s.start_date and s.end_date for s in segs):
            raise GenerationError("either every segment is dated or none is")
        try:
            spans = [(pd.Timestamp(dt.date.fromisoformat(s.start_date)),
                      pd.Timestamp(dt.date.fromisoformat(s.end_date))) for s in segs]
        except ValueError as exc:
            raise GenerationError(f"invalid segment date: {exc}")
        self.start_date = segs[0].start_date
        out = []
        for i, (s, (lo, hi)) in enumerate(zip(segs, spans)):
            if i and lo != spans[i - 1][1] + pd.offsets.BDay(1):
                raise GenerationError(f"segment {i} does not start on the business day after segment {i - 1}")
            n = len(pd.bdate_range(lo, hi))
            if n < 1 or lo.dayofweek > 4:
                raise GenerationError(f"segment {i} must start on a business day and be non-empty")
            if s.n_dates is not None and s.n_dates != n:
                raise GenerationError(f"segment {i}: n_dates disagrees with its date range")
            out.append(replace(s, n_dates=n))
        return out

    @property
    def n_dates(self):
        return sum(s.n_dates for s in self.segments)

    def calendar(self):
        start = pd.Timestamp(dt.date.fromisoformat(self.start_date))
        return [d.strftime("%Y-%m-%d") for d in pd.bdate_range(start, periods=self.n_dates)]

    def segment_bounds(self):
        """(start_idx, end_idx_exclusive) per segment on the generated calendar."""
        out, pos = [], 0
        for s in self.segments:
            out.append((pos, pos + s.n_dates))
            pos += s.n_dates
        return out

    def per_date(self, attr):
        return np.concatenate([np.full(s.n_dates, getattr(s, attr), dtype=float) for s in self.segments])

    def to_dict(self):
        d = asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise GenerationError(f"unknown script keys {sorted(extra)}")
        return cls(**d)


def _heteroscedastic_scale(pct, het):
    return 1.0 + het * np.abs(2.0 * pct - 1.0)


def _normal_scores(n):
    pct = np.arange(n) / (n - 1.0)
    return ndtri((np.arange(n) + 0.5) / n), pct


@lru_cache(maxsize=None)
def _calibration_draws(n, het):
    rng = np.random.default_rng(CALIBRATION_SEED)
    z, pct = _normal_scores(n)
    eta = rng.standard_normal((CALIBRATION_DRAWS, n)) * _heteroscedastic_scale(pct, het)
    return z, eta


def expected_rank_ic(loading, n, het):
    """Monte-Carlo E[Spearman(score, return)] for a unit-noise loading."""
    z, eta = _calibration_draws(n, het)
    y = loading * z[None, :] + eta
    ry = rankdata(y, axis=1)
    rz = np.arange(1, n + 1, dtype=float)
    rz = rz - rz.mean()
    ry = ry - ry.mean(axis=1, keepdims=True)
    rho = (ry @ rz) / np.sqrt((ry * ry).sum(axis=1) * (rz @ rz))
    return float(rho.mean())


@lru_cache(maxsize=None)
def solve_loading(target_ic, noise_scale, n, het):
    """Score loading b giving E[RankIC] = target_ic; raises if out of reach."""
    if target_ic == 0.0:
        return 0.0
    bound = MAX_LOADING / noise_scale
    hi_ic = expected_rank_ic(bound, n, het)
    if abs(target_ic) > hi_ic:
        raise GenerationError(
            f"target_ic {target_ic} unreachable with noise_scale {noise_scale}: "
            f"max expected RankIC is {hi_ic:.3f}"
        )
    lo, hi = 0.0, bound
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected_rank_ic(mid, n, het) < abs(target_ic):
            lo = mid
        else:
            hi = mid
    return float(np.copysign(0.5 * (lo + hi), target_ic) * noise_scale)


def _rolling(a, window, fn):
    """Trailing-window reduction over axis 0 of a (T, ...) array; NaN until full."""
    out = np.full(a.shape, np.nan)
    frame = pd.DataFrame(a.reshape(a.shape[0], -1))
    r = getattr(frame.rolling(window, min_periods=window), fn)()
    out[:] = r.to_numpy().reshape(a.shape)
    return out


def _trailing_percentile(v, window):
    """Percentile of v[t] within v[t-window+1 .. t]."""
    out = np.full(v.size, np.nan)
    for t in range(window - 1, v.size):
        w = v[t - window + 1: t + 1]
        out[t] = np.mean(w <= v[t])
    return out


def generate(script):
    """Generate a panel for ``script``; deterministic in (script, seed)."""
    T, N = script.n_dates, script.universe_size
    ss = np.random.SeedSequence(script.seed)
    (rng_assets, rng_market, rng_idio, rng_quality, rng_stress,
     rng_second, rng_volume, rng_returns) = [np.random.default_rng(s) for s in ss.spawn(8)]

    target = script.per_date("target_ic")
    noise = script.per_date("noise_scale")
    stress = script.per_date("stress_level")
    if script.stress_follows_efficacy:
        stress = np.clip(stress + 0.8 * (0.3 - target), 0.0, 1.0)
    # burn-in history reuses the first segment's parameters
    full_stress = np.concatenate([np.full(BURN_IN, stress[0]), stress])
    TT = T + BURN_IN

    sector = rng_assets.integers(0, N_SECTORS, size=N).astype(float)
    beta = 1.0 + 0.3 * rng_assets.standard_normal(N)
    idio_vol = 0.02 * np.exp(0.35 * rng_assets.standard_normal(N))
    liquidity = np.exp(16.0 + 1.0 * rng_assets.standard_normal(N))

    # latent implied-vol index: AR(1) around a stress-dependent level
    level = 12.0 + 28.0 * full_stress
    shocks = rng_stress.standard_normal(TT)
    phi_v = script.stress_persistence
    # keep the stationary spread of the index fixed across persistence settings
    shock_sd = 3.5 * np.sqrt(1.0 - phi_v * phi_v)
    vix = np.empty(TT)
    vix[0] = level[0]
    for t in range(1, TT):
        vix[t] = level[t] + phi_v * (vix[t - 1] - level[t]) + shock_sd * shocks[t]
    vix = np.maximum(vix, 5.0)

    mkt_sigma = 0.006 * (1.0 + 1.5 * full_stress)
    mkt = 0.0003 + mkt_sigma * rng_market.standard_normal(TT)
    daily = beta[None, :] * mkt[:, None] + idio_vol[None, :] * rng_idio.standard_normal((TT, N))
    volume = liquidity[None, :] * np.exp(0.4 * rng_volume.standard_normal((TT, N)))

    ann = np.sqrt(252.0)
    feats = {
        "mom_1m": _rolling(daily, 21, "sum"),
        "mom_3m": _rolling(daily, 63, "sum"),
        "mom_12m": _rolling(daily, 252, "sum"),
        "vol_20d": _rolling(daily, 20, "std") * ann,
        "vol_60d": _rolling(daily, 60, "std") * ann,
        "adv_20d": _rolling(volume, 20, "mean"),
    }
    mret21 = _rolling(mkt, 21, "sum")
    market = {
        "vix_percentile_252d": _trailing_percentile(vix, 252),
        "market_vol_21d": _rolling(mkt, 21, "std") * ann,
        "market_return_21d": mret21,
        "market_regime_enc": np.where(mret21 > 0.02, 1.0, np.where(mret21 < -0.02, -1.0, 0.0)),
    }
    feats = {k: v[BURN_IN:] for k, v in feats.items()}
    market = {k: v[BURN_IN:] for k, v in market.items()}
    daily = daily[BURN_IN:]

    phi = script.score_persistence
    q = np.empty((T, N))
    q[0] = rng_quality.standard_normal(N)
    innov = rng_quality.standard_normal((T, N)) * np.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        q[t] = phi * q[t - 1] + innov[t]
    score = q + script.score_noise * rng_quality.standard_normal((T, N))
    sec_sigma = script.disagree_base * np.exp(script.disagree_sensitivity * (0.3 - target))
    secondary = score + sec_sigma[:, None] * rng_second.standard_normal((T, N))

    order = np.argsort(score, axis=1, kind="mergesort")
    z_sorted, pct_sorted = _normal_scores(N)
    z = np.empty((T, N))
    pct = np.empty((T, N))
    rows = np.arange(T)[:, None]
    z[rows, order] = z_sorted
    pct[rows, order] = pct_sorted
    xs_rank = np.empty((T, N))
    for t in range(T):
        xs_rank[t] = stats.percentile_rank(score[t])
    scale = _heteroscedastic_scale(pct, script.heteroscedasticity)

    loadings = np.array([
        solve_loading(float(a), float(b), N, float(script.heteroscedasticity))
        for a, b in zip(target, noise)
    ])
    fwd = {}
    for h in script.horizons:
        eta = rng_returns.standard_normal((T, N))
        y = loadings[:, None] * z + noise[:, None] * scale * eta
        sd = np.sqrt(loadings ** 2 + noise ** 2 * np.mean(scale ** 2, axis=1))
        r = 0.05 * np.sqrt(h / 20.0) * y / sd[:, None]
        r[T - h:] = np.nan  # exit price not yet observed
        fwd[h] = r

    dates = script.calendar()
    columns = {
        "date": np.repeat(dates, N),
        "asset": np.tile([f"A{i:03d}" for i in range(N)], T),
    }
    for k in ("mom_1m", "mom_3m", "mom_12m", "vol_20d", "vol_60d", "adv_20d"):
        columns[k] = feats[k].ravel()
    columns["cross_sectional_rank"] = xs_rank.ravel()
    for k in ("vix_percentile_252d", "market_regime_enc", "market_vol_21d", "market_return_21d"):
        columns[k] = np.repeat(market[k], N)
    columns["sector_enc"] = np.tile(sector, T)
    columns["score_primary"] = score.ravel()
    columns["score_secondary"] = secondary.ravel()
    columns[DAILY_RETURN] = daily.ravel()
    for h in script.horizons:
        columns[return_column(h)] = fwd[h].ravel()
    return Panel.from_frame(pd.DataFrame(columns))


def realized_ic_profile(panel, horizon, score_col="score_primary"):
    """Per-date Spearman(score, forward return); degenerate dates are skipped."""
    ret = panel.column(return_column(horizon))
    score = panel.column(score_col)
    out = {}
    for d, sl in panel.date_slices():
        m = np.isfinite(ret[sl]) & np.isfinite(score[sl])
        if m.sum() < 3:
            continue
        try:
            out[d] = stats.spearman(score[sl][m], ret[sl][m])
        except Exception:
            continue
    return pd.Series(out, dtype=float, name="rank_ic")


def default_script(seed=0, universe_size=60):
    """Stationary heteroscedastic script used by the structural diagnostics."""
    return RegimeScript(
        segments=[
            Segment(250, 0.10, 1.0, 0.3),
            Segment(250, 0.15, 1.0, 0.5),
            Segment(250, 0.05, 1.0, 0.2),
            Segment(250, 0.12, 1.0, 0.4),
        ],
        universe_size=universe_size,
        seed=seed,
    )


def collapse_script(seed=0, universe_size=60, stress_follows_efficacy=False):
    """Healthy, collapsed (0.3 -> -0.1) and recovered efficacy.

    Stress is held flat so the implied-vol index only carries its own
    noise; set ``stress_follows_efficacy`` to tie the two together instead.
    """
    return RegimeScript(
        segments=[
            Segment(450, 0.30, 1.0, 0.4),
            Segment(200, -0.10, 1.0, 0.4),
            Segment(150, 0.30, 1.0, 0.4),
            Segment(200, -0.10, 1.0, 0.4),
            Segment(200, 0.30, 1.0, 0.4),
        ],
        universe_size=universe_size,
        seed=seed,
        stress_follows_efficacy=stress_follows_efficacy,
    )
