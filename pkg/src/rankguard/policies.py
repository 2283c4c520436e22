"""Position sizing rules and deployment policy variants.

Every gated variant holds cash on dates where the gate is inactive. On
active dates a variant runs size -> select -> cap:

ungated_raw        top/bottom K by score, no gate
gate_raw           same, gated
gate_vol           select by score * min(1, c_vol / sqrt(vol_20d + eps))
gate_ua_sort       longs by s + lambda * e, shorts by s - lambda * e
gate_resid_ehat    raw selection, weights scaled by the residual of e on |score|
gate_ehat_cap      raw selection, members above the P_p of e get weight * kappa
gate_vol_ehat_cap  vol selection followed by the same cap
trail_ic_k4        raw selection scaled by clip(ewma matured IC / ic_ref, 0, 1), no gate
"""
import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from . import stats
from .errors import ConfigError, InsufficientUniverse, NumericalError, SingularDesign

logger = logging.getLogger(__name__)

VARIANTS = (
    "ungated_raw",
    "gate_raw",
    "gate_vol",
    "gate_ua_sort",
    "gate_resid_ehat",
    "gate_ehat_cap",
    "gate_vol_ehat_cap",
    "trail_ic_k4",
)
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.3, 0.5, 1.0, 2.0)
LEDGER_COLUMNS = ["date", "asset", "side", "raw_weight", "sized_weight", "capped_flag", "final_weight"]


@dataclass(frozen=True)
class PolicySpec:
    variant: str
    name: str = None
    K: int = 10
    theta: float = 0.2
    cap_p: float = 0.85
    cap_kappa: float = 0.70
    ua_lambda: float = None
    ua_sign: float = 1.0
    epsilon: float = 1e-6
    c_vol: float = None
    c_resid: float = None
    ic_ref: float = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown policy variant {self.variant!r}")
        if self.name is None:
            object.__setattr__(self, "name", self.variant)
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if not 0.0 < self.cap_p < 1.0:
            raise ConfigError("cap_p must lie in (0, 1)")
        if not 0.0 < self.cap_kappa <= 1.0:
            raise ConfigError("cap_kappa must lie in (0, 1]")
        if self.ua_lambda is not None and self.ua_lambda < 0:
            raise ConfigError("ua_lambda must be non-negative")
        if self.ua_sign not in (1.0, -1.0):
            raise ConfigError("ua_sign must be +1 or -1")

    @property
    def gated(self):
        return self.variant not in ("ungated_raw", "trail_ic_k4")

    @property
    def uses_vol(self):
        return self.variant in ("gate_vol", "gate_vol_ehat_cap")

    @property
    def uses_cap(self):
        return self.variant in ("gate_ehat_cap", "gate_vol_ehat_cap")


PRESETS = {
    "ungated_raw": PolicySpec("ungated_raw"),
    "gate_raw": PolicySpec("gate_raw"),
    "gate_vol": PolicySpec("gate_vol"),
    "gate_ua_sort": PolicySpec("gate_ua_sort"),
    "gate_resid_ehat": PolicySpec("gate_resid_ehat"),
    "gate_ehat_cap": PolicySpec("gate_ehat_cap", cap_p=0.90, cap_kappa=0.50),
    "gate_vol_ehat_cap": PolicySpec("gate_vol_ehat_cap", cap_p=0.85, cap_kappa=0.70),
    "trail_ic_k4": PolicySpec("trail_ic_k4"),
}


def vol_multiplier(vol, c_vol, epsilon=1e-6):
    vol = np.asarray(vol, dtype=float)
    return np.minimum(1.0, c_vol / np.sqrt(np.maximum(vol, 0.0) + epsilon))


def vol_size(score, vol, c_vol, epsilon=1e-6):
    """score * min(1, c_vol / sqrt(vol + eps))."""
    return np.asarray(score, dtype=float) * vol_multiplier(vol, c_vol, epsilon)


def _bisect_median(fn, target, lo, hi, band, what):
    """Solve median(fn(c)) = target for a nondecreasing fn by bisection."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.median(fn(mid)) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    c = 0.5 * (lo + hi)
    med = float(np.median(fn(c)))
    if not band[0] <= med <= band[1]:
        raise NumericalError(f"{what}: median multiplier {med:.4f} outside {band}")
    return c


def calibrate_c_vol(vol, epsilon=1e-6, target=0.7, band=(0.69, 0.71)):
    """c_vol with median vol multiplier on the given (DEV) rows near ``target``."""
    vol = np.asarray(vol, dtype=float)
    vol = vol[np.isfinite(vol)]
    if vol.size == 0:
        raise NumericalError("no finite vol values for calibration")
    hi = float(np.sqrt(vol.max() + epsilon))
    return _bisect_median(lambda c: vol_multiplier(vol, c, epsilon), target, 0.0, hi, band, "c_vol")


def calibrate_c_resid(residuals, epsilon=1e-6, target=0.7, band=(0.69, 0.71)):
    """c_resid with median multiplier near ``target`` over positive residuals.

    Non-positive residuals always map to a multiplier of 1, so they are left
    out of the median (otherwise the target is unreachable whenever half the
    residuals are non-positive, which OLS makes the typical case).
    """
    r = np.asarray(residuals, dtype=float)
    r = r[np.isfinite(r) & (r > 0)]
    if r.size == 0:
        raise NumericalError("no positive residuals for calibration")
    hi = float(np.sqrt(r.max() + epsilon))
    return _bisect_median(lambda c: resid_multiplier(r, c, epsilon), target, 0.0, hi, band, "c_resid")


def calibrate_ic_ref(matured_ic):
    """Median of the positive matured IC values (DEV)."""
    ic = np.asarray(matured_ic, dtype=float)
    pos = ic[np.isfinite(ic) & (ic > 0)]
    if pos.size == 0:
        raise NumericalError("no positive matured IC for the trailing-IC reference")
    return float(np.median(pos))


def select_legs(values, assets, K, short_values=None):
    """Top-K longs and bottom-K shorts with weights +-1/K.

    Ties are broken by asset id. With a single ranking vector the order is
    (value descending, asset ascending): longs are its first K entries and
    shorts its last K, so the legs never overlap. With ``short_values`` the
    shorts are the lowest K of that vector among assets not already long.
    Returns (long positions, short positions) as index arrays.
    """
    values = np.asarray(values, dtype=float)
    assets = np.asarray(assets)
    n = values.size
    if n < 2 * K:
        raise InsufficientUniverse(f"{n} assets cannot fill two legs of {K}")
    order = np.lexsort((assets, -values))
    longs = order[:K]
    if short_values is None:
        shorts = order[n - K:][::-1]
    else:
        sv = np.asarray(short_values, dtype=float)
        free = np.setdiff1d(np.arange(n), longs)
        sub = free[np.lexsort((assets[free], sv[free]))]
        shorts = sub[:K]
    return longs, shorts


def ua_sort_values(score, ehat, lam, sign=1.0):
    """(long ranking, short ranking) = (s + sign*lam*e, s - sign*lam*e)."""
    s = np.asarray(score, dtype=float)
    e = np.asarray(ehat, dtype=float)
    return s + sign * lam * e, s - sign * lam * e


def ehat_cap(weights, ehat, members, p, kappa):
    """Scale members whose e is strictly above the cross-sectional P_p by kappa.

    ``ehat`` covers the full cross-section; the percentile uses its defined
    values. If any member lacks e the date is left uncapped with a warning.
    Returns (weights, capped mask).
    """
    w = np.asarray(weights, dtype=float).copy()
    e = np.asarray(ehat, dtype=float)
    members = np.asarray(members, dtype=bool)
    capped = np.zeros(w.size, dtype=bool)
    if not np.all(np.isfinite(e[members])):
        warnings.warn("undefined e for a portfolio member; date left uncapped")
        return w, capped
    threshold = np.quantile(e[np.isfinite(e)], p)
    capped = members & (e > threshold)
    w[capped] *= kappa
    return w, capped


def resid_multiplier(residual, c_resid, epsilon=1e-6):
    r = np.asarray(residual, dtype=float)
    return np.minimum(1.0, c_resid / np.sqrt(np.maximum(r, 0.0) + epsilon))


def resid_residuals(ehat, score):
    """Per-date OLS residual of e on |score| over rows with a defined e."""
    e = np.asarray(ehat, dtype=float)
    s = np.abs(np.asarray(score, dtype=float))
    out = np.full(e.size, np.nan)
    ok = np.isfinite(e) & np.isfinite(s)
    out[ok] = stats.ols_residualize(e[ok], s[ok])
    return out


def trail_ic_scale(ewma_ic, ic_ref):
    """clip(ewma / ic_ref, 0, 1); an undefined trailing IC means no exposure."""
    if ewma_ic is None or not np.isfinite(ewma_ic):
        return 0.0
    return float(np.clip(ewma_ic / ic_ref, 0.0, 1.0))


@dataclass
class PolicyResult:
    spec: PolicySpec
    rebalance_dates: np.ndarray
    abstained: np.ndarray
    ledger: pd.DataFrame

    def weights(self):
        """date_idx -> Series(asset -> final weight) for every rebalance date."""
        out = {int(d): pd.Series(dtype=float) for d in self.rebalance_dates}
        for d, grp in self.ledger.groupby("date_idx", sort=True):
            out[int(d)] = pd.Series(grp["final_weight"].to_numpy(), index=grp["asset"].to_numpy())
        return out


@dataclass
class DateInputs:
    """Cross-section for one rebalance date."""

    date: str
    date_idx: int
    assets: np.ndarray
    score: np.ndarray
    vol: np.ndarray
    ehat: np.ndarray
    active: object = None
    ewma_ic: float = float("nan")


def weights_for_date(x, spec):
    """Return (abstained, rows) where rows are ledger dicts for one date."""
    if spec.gated and not bool(x.active):
        return True, []
    K = spec.K
    score = x.score
    short_values = None
    if spec.uses_vol:
        if spec.c_vol is None:
            raise ConfigError(f"{spec.name}: c_vol not calibrated")
        values = vol_size(score, x.vol, spec.c_vol, spec.epsilon)
    elif spec.variant == "gate_ua_sort":
        if spec.ua_lambda is None:
            raise ConfigError(f"{spec.name}: lambda not calibrated")
        if np.all(np.isfinite(x.ehat)):
            values, short_values = ua_sort_values(score, x.ehat, spec.ua_lambda, spec.ua_sign)
        else:
            warnings.warn(f"{x.date}: undefined e, raw selection used")
            values = score
    else:
        values = score
    try:
        longs, shorts = select_legs(values, x.assets, K, short_values)
    except InsufficientUniverse as exc:
        warnings.warn(f"{x.date}: {exc}; date skipped")
        return True, []
    n = score.size
    raw = np.zeros(n)
    raw[longs] = 1.0 / K
    raw[shorts] = -1.0 / K
    members = raw != 0
    sized = raw.copy()
    capped = np.zeros(n, dtype=bool)
    if spec.variant == "gate_resid_ehat":
        if spec.c_resid is None:
            raise ConfigError(f"{spec.name}: c_resid not calibrated")
        try:
            res = resid_residuals(x.ehat, score)
            if not np.all(np.isfinite(res[members])):
                raise SingularDesign("undefined residual for a member")
            sized = raw * np.where(members, resid_multiplier(np.nan_to_num(res), spec.c_resid, spec.epsilon), 1.0)
        except (SingularDesign, NumericalError) as exc:
            warnings.warn(f"{x.date}: residual sizing unavailable ({exc}); unsized weights used")
    elif spec.variant == "trail_ic_k4":
        if spec.ic_ref is None:
            raise ConfigError(f"{spec.name}: ic_ref not calibrated")
        sized = raw * trail_ic_scale(x.ewma_ic, spec.ic_ref)
    final = sized
    if spec.uses_cap:
        final, capped = ehat_cap(sized, x.ehat, members, spec.cap_p, spec.cap_kappa)
    rows = []
    for i in np.concatenate([longs, shorts]):
        rows.append({
            "date": x.date, "date_idx": x.date_idx, "asset": x.assets[i],
            "side": "long" if raw[i] > 0 else "short",
            "raw_weight": raw[i], "sized_weight": sized[i],
            "capped_flag": bool(capped[i]), "final_weight": final[i],
        })
    return False, rows


def build_date_inputs(panel, dates, ehat, active=None, ewma_ic=None):
    """Per-date cross-sections. ``ehat`` is aligned to panel rows (NaN where
    undefined); ``active`` and ``ewma_ic`` are per calendar position."""
    frame = panel.frame
    score = panel.column("score_primary")
    vol = panel.column("vol_20d")
    ehat = np.asarray(ehat, dtype=float)
    assets = frame["asset"].to_numpy()
    slices = dict(panel.date_slices())
    out = []
    for d in dates:
        sl = slices[int(d)]
        ok = np.isfinite(score[sl])
        out.append(DateInputs(
            date=panel.dates[int(d)], date_idx=int(d),
            assets=assets[sl][ok], score=score[sl][ok], vol=vol[sl][ok], ehat=ehat[sl][ok],
            active=None if active is None else active[int(d)],
            ewma_ic=float("nan") if ewma_ic is None else float(ewma_ic[int(d)]),
        ))
    return out


def apply_policy(inputs, spec):
    """Run a policy over prepared per-date inputs."""
    rows, abstained = [], []
    for x in inputs:
        skip, r = weights_for_date(x, spec)
        abstained.append(skip)
        rows.extend(r)
    ledger = pd.DataFrame(rows, columns=["date", "date_idx"] + LEDGER_COLUMNS[1:])
    return PolicyResult(spec, np.array([x.date_idx for x in inputs], dtype=int),
                        np.array(abstained, dtype=bool), ledger)


def write_ledger(result, path):
    result.ledger[LEDGER_COLUMNS].to_csv(path, index=False, float_format="%.17g")


def calibrate_lambda(inputs, spec, evaluate, grid=LAMBDA_GRID):
    """Pick the grid lambda maximizing ``evaluate(PolicyResult)`` (a Sharpe
    on DEV); ties go to the smaller lambda. Returns (lambda, scores)."""
    scores = {}
    for lam in grid:
        res = apply_policy(inputs, replace(spec, ua_lambda=lam))
        scores[lam] = evaluate(res)
    finite = {k: v for k, v in scores.items() if np.isfinite(v)}
    if not finite:
        raise NumericalError("no lambda in the grid gives a defined Sharpe")
    best = max(finite, key=lambda k: (finite[k], -k))
    return best, scores
