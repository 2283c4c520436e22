"""End-to-end orchestration: panel -> labels -> g(x) -> floors -> gate ->
DEV calibrations -> policies -> portfolio -> conformal, written as one run bundle.

Every constant fit on data (c_vol, lambda, c_resid, ic_ref, tier-0 c) sees
DEV dates only and is then held frozen for FINAL.
"""
import hashlib
import json
import logging
import platform
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import conformal, deup, gate, panel as panel_mod, policies, portfolio, synthetic
from .errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

PERIODS = ("ALL", "DEV", "FINAL")
ABLATION_FLOORS = ("oracle", "pit", "exp")


def _versions():
    import numba
    import scipy

    from . import __version__
    return {
        "rankguard": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "pandas": pd.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
    }


class Bundle:
    """Single emitter for every output file; records a digest per file."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def path(self, name):
        return self.root / name

    def _record(self, name):
        self.files[name] = hashlib.sha256(self.path(name).read_bytes()).hexdigest()

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(portfolio.clean_json(obj), fh, indent=1, sort_keys=True, allow_nan=False)
            fh.write("\n")
        self._record(name)

    def emit(self, name, writer, *args):
        writer(*args, self.path(name))
        self._record(name)

    def manifest(self, cfg, command):
        self.json("manifest.json", {
            "command": command,
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "versions": _versions(),
            "files": dict(sorted(self.files.items())),
        })


@dataclass
class Context:
    cfg: object
    panel: object
    script: object = None
    dev_end: str = None
    dev: np.ndarray = None  # per calendar position
    tables: dict = field(default_factory=dict)
    eval_start: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    gate: pd.DataFrame = None

    def period_of(self, date_idx):
        return np.where(self.dev[np.asarray(date_idx, dtype=int)], "DEV", "FINAL")

    def in_period(self, date_idx, period):
        date_idx = np.asarray(date_idx, dtype=int)
        if period == "ALL":
            return np.ones(date_idx.size, dtype=bool)
        return self.dev[date_idx] if period == "DEV" else ~self.dev[date_idx]


# ---------------------------------------------------------------- inputs

def load_panel(cfg):
    if cfg.input.kind == "csv":
        return panel_mod.ingest_csv(cfg.input.path), None
    script = cfg.script()
    return synthetic.generate(script), script


def fold_plan(cfg, n_dates, horizon):
    f = cfg.folds
    return panel_mod.walk_forward_folds(n_dates, f.n_folds, f.embargo_days, horizon, f.min_train_folds)


def _first_emitting(folds):
    for p in folds:
        if p.emits_predictions:
            return p.predict_start
    raise ConfigError("fold plan emits no predictions; lower min_train_folds")


def resolve_dev_end(cfg, panel, eval_start):
    dates = panel.dates
    if cfg.dev_end is None:
        last = panel.n_dates - 1 - cfg.primary_horizon
        if last <= eval_start:
            raise ConfigError("too few dates after the first prediction fold to split DEV/FINAL")
        return dates[eval_start + (last - eval_start) // 2]
    dev_end = str(cfg.dev_end)
    if not dates[0] <= dev_end < dates[-1]:
        raise ConfigError(f"dev_end {dev_end} outside the date range {dates[0]}..{dates[-1]}")
    if dev_end < dates[eval_start]:
        raise ConfigError(f"dev_end {dev_end} precedes the first out-of-sample date {dates[eval_start]}")
    return dev_end


def build_context(cfg):
    panel, script = load_panel(cfg)
    missing = [h for h in cfg.horizons if h not in panel.horizons]
    if missing:
        raise DataError(f"panel has no forward returns for horizons {missing}")
    ctx = Context(cfg=cfg, panel=panel, script=script)
    start = _first_emitting(fold_plan(cfg, panel.n_dates, cfg.primary_horizon))
    ctx.dev_end = resolve_dev_end(cfg, panel, start)
    ctx.dev = panel_mod.period_mask(panel, ctx.dev_end)
    logger.info("panel: %d dates x %d rows; DEV ends %s", panel.n_dates, len(panel.frame), ctx.dev_end)
    return ctx


# ---------------------------------------------------------------- uncertainty

def deup_stage(ctx, horizon):
    """g(x) walk-forward, aleatoric floors and the joined uncertainty table."""
    cfg, panel = ctx.cfg, ctx.panel
    folds = fold_plan(cfg, panel.n_dates, horizon)
    ctx.eval_start[horizon] = _first_emitting(folds)
    labels = panel_mod.make_rank_labels(panel, horizon)
    g_frame = deup.train_gx_walkforward(panel, labels, folds, cfg.gbt)
    al = cfg.aleatoric
    floors = {}
    for key, mode in (("oracle", "oracle"), ("pit", "pit_rolling"), ("exp", "expanding")):
        floors[key] = deup.aleatoric_baseline(
            labels, deup.AleatoricConfig(mode, al.window, al.quantile_level), panel.n_dates, horizon)
    table = deup.uncertainty_table(panel, horizon, g_frame, labels, floors)
    rows = table.index.to_numpy()
    for col in ("vol_20d", "vix_percentile_252d"):
        table[col] = panel.frame[col].to_numpy(dtype=float)[rows] if col in panel.frame else np.nan
    table["abs_score"] = np.abs(table["score"].to_numpy())
    table["period"] = ctx.period_of(table["date_idx"])
    cal = ctx.calibration.setdefault(f"h{horizon}", {})
    if al.tier0:
        dev_dates = np.flatnonzero(ctx.dev)
        cfg0 = deup.AleatoricConfig("tier0_iqr", al.window, al.quantile_level)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            iqr = deup._cross_sectional_iqr(panel, horizon)
        cal["tier0_c"] = deup.calibrate_tier0(iqr, labels, dev_dates, cfg0.epsilon)
        a0 = cal["tier0_c"] / (iqr + cfg0.epsilon)
        table["a_tier0"] = a0[table["date_idx"].to_numpy()]
        table["e_tier0"] = deup.epistemic(table["g"].to_numpy(), table["a_tier0"].to_numpy())
    if al.tier2:
        width = deup.tier2_quantile_baseline(panel, folds, horizon)
        table["tier2_width"] = width[rows]
    ctx.tables[horizon] = table
    return table


def rankic_panel(ctx, horizon):
    ic = gate.daily_rank_ic(ctx.panel, horizon)
    out = {}
    for period in PERIODS:
        m = np.isfinite(ic) & ctx.in_period(np.arange(ic.size), period)
        x = ic[m]
        sd = float(x.std(ddof=1)) if x.size > 1 else float("nan")
        out[period] = {
            "n_dates": int(x.size),
            "mean": float(x.mean()) if x.size else float("nan"),
            "median": float(np.median(x)) if x.size else float("nan"),
            "std": sd,
            "stability": float(x.mean() / sd) if x.size > 1 and sd > 0 else float("nan"),
            "pct_positive": float(np.mean(x > 0)) if x.size else float("nan"),
        }
    return out


def quintile_section(table):
    out = {}
    for col in ("e_pit", "e_oracle"):
        out[col] = {}
        for period in ("DEV", "FINAL"):
            sub = table[table["period"] == period]
            try:
                out[col][period] = deup.quintile_table(sub[col].to_numpy(), sub["rank_loss"].to_numpy())
            except (DataError, NumericalError) as exc:
                out[col][period] = {"error": str(exc)}
    return out


def dominance_section(table):
    # market-level features are constant within a date and carry no per-date ranking
    candidates = {"e_pit": "e_pit", "e_oracle": "e_oracle", "g": "g", "vol_20d": "vol_20d",
                  "abs_score": "abs_score"}
    for extra in ("e_tier0", "tier2_width"):
        if extra in table:
            candidates[extra] = extra
    frame = deup.baseline_dominance_table(table, candidates, "rank_loss", "period")
    coupling = deup.coupling_series(table, "e_pit", "score")
    return {
        "mean_spearman_with_loss": {k: frame.loc[k].to_dict() for k in frame.index},
        "coupling_e_abs_score": {"median": coupling["median"], "frac_positive": coupling["frac_positive"]},
    }


# ---------------------------------------------------------------- gate

def gate_stage(ctx):
    h = ctx.cfg.primary_horizon
    ctx.gate = gate.compute_gate(ctx.panel, h, ctx.cfg.gate)
    return ctx.gate


def _per_date_mean(panel, col):
    out = np.full(panel.n_dates, np.nan)
    if col not in panel.frame:
        return out
    v = panel.column(col)
    for d, sl in panel.date_slices():
        x = v[sl][np.isfinite(v[sl])]
        if x.size:
            out[d] = x.mean()
    return out


def gate_predictors(ctx):
    """Per-date predictors oriented so that larger means 'trade'."""
    g, panel = ctx.gate, ctx.panel
    vix_pct = _per_date_mean(panel, "vix_percentile_252d")
    preds = {
        "G": g["G"].to_numpy(dtype=float),
        "H": g["H"].to_numpy(dtype=float),
        "vix_window_gate": gate.vix_gate_baseline(vix_pct, ranked=True)["score"].to_numpy(),
        "inv_vix_percentile": 1.0 - vix_pct,
        "inv_market_vol": -_per_date_mean(panel, "market_vol_21d"),
        "inv_mean_stock_vol": -_per_date_mean(panel, "vol_20d"),
    }
    table = ctx.tables.get(ctx.cfg.primary_horizon)
    if table is not None:
        agg = {"median": np.full(panel.n_dates, np.nan), "p90": np.full(panel.n_dates, np.nan),
               "iqr": np.full(panel.n_dates, np.nan)}
        for d, grp in table.groupby("date_idx", sort=True):
            e = grp["e_pit"].to_numpy(dtype=float)
            e = e[np.isfinite(e)]
            if e.size:
                agg["median"][d] = np.median(e)
                agg["p90"][d] = np.quantile(e, 0.9)
                agg["iqr"][d] = np.quantile(e, 0.75) - np.quantile(e, 0.25)
        for k, v in agg.items():
            preds[f"inv_agg_ehat_{k}"] = -v
    return preds


def gate_evaluation(ctx):
    cfg = ctx.cfg
    g = ctx.gate
    matured = g["matured_ic"].to_numpy(dtype=float)
    start = ctx.eval_start.get(cfg.primary_horizon, 0)
    window = np.arange(g.shape[0]) >= start
    H = g["H"].to_numpy(dtype=float)
    out = {"theta": cfg.gate.theta, "eval_start": ctx.panel.dates[start], "periods": {}}
    preds = gate_predictors(ctx)
    for period in PERIODS:
        m = window & ctx.in_period(np.arange(g.shape[0]), period)
        block = {}
        for name, x in sorted(preds.items()):
            theta = cfg.gate.theta if name == "G" else float("nan")
            try:
                res = gate.evaluate_gate(np.where(m, x, np.nan), matured, theta,
                                         tiebreak=np.where(m, H, np.nan) if name == "G" else None)
            except NumericalError as exc:
                res = {"error": str(exc)}
            if name != "G":
                for k in ("precision", "recall", "abstention", "confusion"):
                    res.pop(k, None)
            block[name] = res
        out["periods"][period] = block
    return out


# ---------------------------------------------------------------- policies

def rebalance_dates(ctx):
    h = ctx.cfg.primary_horizon
    start = ctx.eval_start[h]
    last = ctx.panel.n_dates - 1 - h
    return portfolio.monthly_rebalance_dates(ctx.panel.dates, start, last)


def _ehat_rows(ctx, col):
    table = ctx.tables[ctx.cfg.primary_horizon]
    out = np.full(len(ctx.panel.frame), np.nan)
    out[table.index.to_numpy()] = table[col].to_numpy(dtype=float)
    return out


def policy_inputs(ctx, dates, ehat_col="e_pit"):
    g = ctx.gate
    active = g["active"].to_numpy()
    return policies.build_date_inputs(ctx.panel, dates, _ehat_rows(ctx, ehat_col), active,
                                      g["h_real"].to_numpy(dtype=float))


def _sharpe(path):
    return portfolio.path_report(path, allow_undefined=True)["sharpe_ann"]


def calibrate_constants(ctx, date_mask, specs):
    """Fit every data-driven policy constant on dates where ``date_mask`` holds."""
    cfg, panel = ctx.cfg, ctx.panel
    h = cfg.primary_horizon
    table = ctx.tables[h]
    start = ctx.eval_start[h]
    rows_ok = date_mask[table["date_idx"].to_numpy()]
    sub = table[rows_ok]
    out = {}
    vol = sub["vol_20d"].to_numpy(dtype=float)
    out["c_vol"] = policies.calibrate_c_vol(vol[np.isfinite(vol)])
    ok = np.isfinite(sub["e_pit"].to_numpy(dtype=float))
    resid = []
    for _, grp in sub[ok].groupby("date_idx", sort=True):
        r = policies.resid_residuals(grp["e_pit"].to_numpy(), grp["score"].to_numpy())
        resid.append(r[np.isfinite(r)])
    out["c_resid"] = policies.calibrate_c_resid(np.concatenate(resid)) if resid else float("nan")
    matured = ctx.gate["matured_ic"].to_numpy(dtype=float)
    window = (np.arange(panel.n_dates) >= start) & date_mask
    out["ic_ref"] = policies.calibrate_ic_ref(matured[window])
    ua = [s for s in specs if s.variant == "gate_ua_sort"]
    if ua:
        dates = [d for d in rebalance_dates(ctx) if date_mask[d]]
        inputs = policy_inputs(ctx, dates)

        def evaluate(res):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return _sharpe(portfolio.simulate_policy(res, panel, h, cfg.cost_bps))

        lam, scores = policies.calibrate_lambda(inputs, ua[0], evaluate)
        out["ua_lambda"] = lam
        out["ua_lambda_dev_sharpe"] = {str(k): v for k, v in scores.items()}
    return out


def frozen_spec(spec, cal):
    return replace(spec, c_vol=cal["c_vol"], c_resid=cal["c_resid"], ic_ref=cal["ic_ref"],
                   ua_lambda=cal.get("ua_lambda", spec.ua_lambda))


def _path_reports(ctx, path):
    cfg = ctx.cfg
    out = {}
    d = path.frame["date_idx"].to_numpy()
    for period in PERIODS:
        m = ctx.in_period(d, period)
        sub = portfolio.PortfolioPath(path.frame[m].reset_index(drop=True), path.cost_bps, path.horizon)
        out[period] = portfolio.path_report(sub, cfg.crisis)
    return out


def policy_stage(ctx, bundle=None):
    cfg, panel = ctx.cfg, ctx.panel
    h = cfg.primary_horizon
    specs = cfg.policy_specs()
    cal = calibrate_constants(ctx, ctx.dev, specs)
    ctx.calibration["policies"] = cal
    dates = rebalance_dates(ctx)
    inputs = policy_inputs(ctx, dates)
    comparison = {}
    for spec in specs:
        spec = frozen_spec(spec, cal)
        res = policies.apply_policy(inputs, spec)
        path = portfolio.simulate_policy(res, panel, h, cfg.cost_bps)
        comparison[spec.name] = _path_reports(ctx, path)
        if bundle is not None:
            bundle.emit(f"weights_{spec.name}.csv", policies.write_ledger, res)
            bundle.emit(f"path_{spec.name}.csv", portfolio.write_path_csv, path)
    return comparison


def capped_sets(result):
    led = result.ledger
    out = {int(d): frozenset() for d in result.rebalance_dates}
    for d, grp in led[led["capped_flag"]].groupby("date_idx", sort=True):
        out[int(d)] = frozenset(grp["asset"])
    return out


def deployability_ablation(ctx):
    """Gate+Vol+e-Cap under each aleatoric floor, compared with the oracle floor."""
    cfg, panel = ctx.cfg, ctx.panel
    h = cfg.primary_horizon
    cal = ctx.calibration["policies"]
    spec = frozen_spec(policies.PRESETS["gate_vol_ehat_cap"], cal)
    dates = rebalance_dates(ctx)
    runs = {}
    for floor in ABLATION_FLOORS:
        inputs = policy_inputs(ctx, dates, f"e_{floor}")
        res = policies.apply_policy(inputs, spec)
        pos = {x.date_idx: float(np.mean(x.ehat > 0)) if np.all(np.isfinite(x.ehat)) else float("nan")
               for x in inputs}
        runs[floor] = (res, portfolio.simulate_policy(res, panel, h, cfg.cost_bps), pos)
    ref_sets = capped_sets(runs["oracle"][0])
    ref_net = runs["oracle"][1].net
    out = {}
    thr = 1.0 - spec.cap_p
    for floor, (res, path, pos) in runs.items():
        sets = capped_sets(res)
        live = [d for d in sets if not res.abstained[list(res.rebalance_dates).index(d)]]
        qualifying = [d for d in live if pos[d] > thr and runs["oracle"][2][d] > thr]
        same = [d for d in qualifying if sets[d] == ref_sets[d]]
        reps = _path_reports(ctx, path)
        out[floor] = {
            "sharpe": {p: reps[p]["sharpe_ann"] for p in PERIODS},
            "crisis_max_dd": reps["ALL"]["crisis_max_dd"],
            "n_live_dates": len(live),
            "n_qualifying_dates": len(qualifying),
            "capped_set_identity": len(same) / len(qualifying) if qualifying else float("nan"),
            "pnl_bit_identical_to_oracle": bool(np.array_equal(path.net, ref_net)),
        }
    return out


# ---------------------------------------------------------------- conformal

def conformal_stage(ctx, horizon, bundle=None):
    cfg = ctx.cfg
    table = ctx.tables[horizon]
    out = {}
    for name in cfg.conformal.normalizers:
        ccfg = conformal.ConformalConfig(name, cfg.conformal.nominal, cfg.conformal.calib_window_days,
                                         cfg.conformal.min_scores)
        iv = conformal.predict_intervals(table, ccfg, horizon)
        if bundle is not None:
            bundle.emit(f"intervals_{name}_h{horizon}.csv", conformal.write_intervals_csv, iv)
        block = {}
        for period in PERIODS:
            sel = ctx.in_period(iv["date_idx"], period)
            sub = iv[sel]
            try:
                block[period] = conformal.coverage_report(sub, table.loc[sub.index, "e_pit"].to_numpy())
            except DataError as exc:
                block[period] = {"error": str(exc)}
        out[name] = block
    return out


# ---------------------------------------------------------------- drivers

class _WarningLog:
    """Collect warnings raised inside the block and log them once each, in order."""

    def __enter__(self):
        self._cm = warnings.catch_warnings(record=True)
        self.records = self._cm.__enter__()
        warnings.simplefilter("always")
        self._np = np.seterr(all="ignore")
        return self

    def __exit__(self, *exc):
        np.seterr(**self._np)
        self._cm.__exit__(*exc)
        counts = Counter(f"{w.category.__name__}: {w.message}" for w in self.records)
        self.summary = dict(sorted(counts.items()))
        for msg, n in self.summary.items():
            logger.warning("%s (x%d)", msg, n)
        return False


def _finish(bundle, cfg, command, summary, warn):
    summary["warnings"] = {"n_total": sum(warn.summary.values()), "n_unique": len(warn.summary),
                           "first": dict(list(warn.summary.items())[:50])}
    bundle.json("summary.json", summary)
    bundle.json("config.json", cfg.to_dict())
    bundle.manifest(cfg, command)
    return summary


def _header(ctx):
    cfg = ctx.cfg
    return {
        "seed": cfg.seed,
        "horizons": list(cfg.horizons),
        "dev_end": ctx.dev_end,
        "n_dates": ctx.panel.n_dates,
        "n_rows": int(len(ctx.panel.frame)),
        "config_sha256": cfg.digest(),
    }


def run(cfg, out=None):
    """Full pipeline; returns the summary dict and writes the bundle to ``out``."""
    bundle = Bundle(out or cfg.out)
    with _WarningLog() as warn:
        ctx = build_context(cfg)
        summary = _header(ctx)
        summary["rankic_panel"], summary["quintiles"], summary["dominance"] = {}, {}, {}
        summary["conformal"] = {}
        for h in cfg.horizons:
            table = deup_stage(ctx, h)
            bundle.emit(f"predictions_h{h}.csv", deup.write_prediction_table, table)
            summary["rankic_panel"][f"h{h}"] = rankic_panel(ctx, h)
            summary["quintiles"][f"h{h}"] = quintile_section(table)
            summary["dominance"][f"h{h}"] = dominance_section(table)
        gate_stage(ctx)
        bundle.emit("gate.csv", gate.write_gate_csv, ctx.gate)
        summary["gate"] = gate_evaluation(ctx)
        summary["policies"] = policy_stage(ctx, bundle)
        summary["deployability"] = deployability_ablation(ctx)
        for h in cfg.horizons:
            summary["conformal"][f"h{h}"] = conformal_stage(ctx, h, bundle)
        summary["calibration"] = ctx.calibration
        summary["policy_specs"] = {s.name: _spec_dict(frozen_spec(s, ctx.calibration["policies"]))
                                   for s in cfg.policy_specs()}
    return _finish(bundle, cfg, "run", summary, warn)


def _spec_dict(spec):
    return asdict(spec)


def eval_gate(cfg, out=None):
    """Gate series and its evaluation against every baseline."""
    bundle = Bundle(out or cfg.out)
    with _WarningLog() as warn:
        ctx = build_context(cfg)
        summary = _header(ctx)
        deup_stage(ctx, cfg.primary_horizon)
        gate_stage(ctx)
        bundle.emit("gate.csv", gate.write_gate_csv, ctx.gate)
        summary["gate"] = gate_evaluation(ctx)
    return _finish(bundle, cfg, "eval-gate", summary, warn)


def run_conformal(cfg, out=None):
    bundle = Bundle(out or cfg.out)
    with _WarningLog() as warn:
        ctx = build_context(cfg)
        summary = _header(ctx)
        summary["conformal"] = {}
        for h in cfg.horizons:
            deup_stage(ctx, h)
            summary["conformal"][f"h{h}"] = conformal_stage(ctx, h, bundle)
        summary["calibration"] = ctx.calibration
    return _finish(bundle, cfg, "conformal", summary, warn)


def generate(cfg, out=None):
    if cfg.input.kind != "synthetic":
        raise ConfigError("generate needs a synthetic input script")
    bundle = Bundle(out or cfg.out)
    script = cfg.script()
    panel = synthetic.generate(script)
    bundle.emit("panel.csv", panel_mod.write_csv, panel)
    bundle.json("script.json", script.to_dict())
    bundle.json("config.json", cfg.to_dict())
    bundle.manifest(cfg, "generate")
    return {"n_dates": panel.n_dates, "n_rows": int(len(panel.frame)), "n_segments": len(script.segments)}

