import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_quantile, brute_spearman, normal_equations_residual
from rankguard import deup, gbt
from rankguard.deup import AleatoricConfig
from rankguard.errors import ConfigError, DataError
from rankguard.panel import Panel, make_rank_labels, walk_forward_folds


def _labels(per_date):
    rows = []
    for d, losses in per_date.items():
        for v in losses:
            rows.append({"date_idx": d, "rank_loss": v})
    return pd.DataFrame(rows)


def _toy_panel(n_dates=40, n_assets=12, seed=0):
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range("2020-01-01", periods=n_dates).strftime("%Y-%m-%d")
    frame = pd.DataFrame({
        "date": np.repeat(dates, n_assets),
        "asset": np.tile([f"s{i:02d}" for i in range(n_assets)], n_dates),
        "score_primary": rng.normal(size=n_dates * n_assets),
        "vol_20d": rng.uniform(0.1, 0.5, size=n_dates * n_assets),
        "ret_20": rng.normal(size=n_dates * n_assets),
    })
    return Panel.from_frame(frame)


def test_gx_features_layout():
    panel = _toy_panel(3, 5)
    panel.frame.loc[0, "score_primary"] = -2.0
    X = deup.build_gx_features(panel)
    assert list(X.columns) == list(deup.GX_FEATURES)
    assert X.shape == (15, 11)
    assert X.loc[0, "abs_score"] == 2.0
    # vol_60d is absent from this panel and comes through as zeros
    assert np.all(X["vol_60d"] == 0.0)
    panel.frame.loc[3, "vol_20d"] = np.nan
    assert deup.build_gx_features(panel).loc[3, "vol_20d"] == 0.0


def test_walkforward_two_fold_toy():
    panel = _toy_panel(40, 12)
    labels = make_rank_labels(panel, 20)
    folds = walk_forward_folds(panel.n_dates, 2, embargo_days=0, horizon=0, min_train_folds=1)
    cfg = gbt.GbtConfig(n_estimators=5, min_child_samples=10)
    g = deup.train_gx_walkforward(panel, labels, folds, cfg)
    d = panel.frame["date_idx"].to_numpy()[g.index]
    assert set(g["fold_id"]) == {2}
    np.testing.assert_array_equal(np.unique(d), folds[1].predict_dates)
    assert np.all((g["g"] >= 0) & (g["g"] <= 1))


def test_walkforward_leakage_audit():
    panel = _toy_panel(120, 12, seed=3)
    labels = make_rank_labels(panel, 20)
    folds = walk_forward_folds(panel.n_dates, 6, embargo_days=10, horizon=20, min_train_folds=3)
    cfg = gbt.GbtConfig(n_estimators=3, min_child_samples=20)
    g = deup.train_gx_walkforward(panel, labels, folds, cfg)
    for plan in folds:
        if not plan.emits_predictions:
            continue
        # every label the fold could have seen matures before the embargo starts
        assert plan.max_train_maturation() + plan.embargo_days <= plan.predict_start
    assert set(g["fold_id"]) == {4, 5, 6}


def test_walkforward_empty_fold_warns():
    panel = _toy_panel(40, 12)
    labels = make_rank_labels(panel, 20)
    folds = walk_forward_folds(panel.n_dates, 4, embargo_days=5, horizon=20, min_train_folds=1)
    with pytest.warns(UserWarning, match="empty training set"):
        g = deup.train_gx_walkforward(panel, labels, folds, gbt.GbtConfig(n_estimators=2, min_child_samples=10))
    assert 2 not in set(g["fold_id"])


def test_oracle_floor_example():
    labels = _labels({0: np.arange(1, 11) / 10.0})
    a = deup.aleatoric_baseline(labels, AleatoricConfig(mode="oracle"), 1, 0)
    assert a[0] == pytest.approx(0.19)


def test_pit_window_before_first_date_undefined():
    labels = _labels({0: [0.1, 0.2], 1: [0.3, 0.4]})
    a = deup.aleatoric_baseline(labels, AleatoricConfig(mode="pit_rolling", window=5), 4, 20)
    assert np.all(np.isnan(a))


def test_expanding_single_matured_date():
    labels = _labels({0: np.arange(1, 11) / 10.0, 1: [0.9, 0.9, 0.9]})
    a = deup.aleatoric_baseline(labels, AleatoricConfig(mode="expanding"), 3, 2)
    assert np.isnan(a[0]) and np.isnan(a[1])
    assert a[2] == pytest.approx(0.19)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6), st.integers(1, 8))
def test_pit_floor_matches_pooled_oracle(seed, horizon, window):
    rng = np.random.default_rng(seed)
    n_dates = 15
    per = {d: rng.uniform(size=rng.integers(2, 6)) for d in range(n_dates) if rng.uniform() > 0.2}
    labels = _labels(per)
    a = deup.aleatoric_baseline(labels, AleatoricConfig(mode="pit_rolling", window=window), n_dates, horizon)
    e = deup.aleatoric_baseline(labels, AleatoricConfig(mode="expanding"), n_dates, horizon)
    for t in range(n_dates):
        pool = [v for u in range(t - horizon - window, t - horizon + 1) if u in per for v in per[u]]
        if pool:
            assert a[t] == pytest.approx(brute_quantile(pool, 0.1), abs=1e-12)
        else:
            assert np.isnan(a[t])
        p10s = [brute_quantile(per[u], 0.1) for u in range(0, t - horizon + 1) if u in per]
        if p10s:
            assert e[t] == pytest.approx(float(np.median(p10s)), abs=1e-12)
        else:
            assert np.isnan(e[t])


def test_tier0_calibration_matches_median():
    panel = _toy_panel(30, 15, seed=2)
    labels = make_rank_labels(panel, 20)
    dev = np.arange(20)
    cfg = AleatoricConfig(mode="tier0_iqr")
    a = deup.aleatoric_baseline(labels, cfg, panel.n_dates, 20, panel=panel, dev_dates=dev)
    dev_rows = labels[labels["date_idx"] < 20]
    assert np.median(a[dev_rows["date_idx"]]) == pytest.approx(np.median(dev_rows["rank_loss"]), rel=1e-8)
    with pytest.raises(ConfigError):
        deup.aleatoric_baseline(labels, cfg, panel.n_dates, 20)


def test_tier2_quantile_band_is_nonnegative():
    panel = _toy_panel(60, 20, seed=4)
    folds = walk_forward_folds(panel.n_dates, 3, embargo_days=0, horizon=20, min_train_folds=1)
    a = deup.tier2_quantile_baseline(panel, folds, 20, gbt.GbtConfig(n_estimators=3, min_child_samples=20))
    assert np.all(a[np.isfinite(a)] >= 0)
    assert np.isfinite(a).any()


def test_config_validation():
    with pytest.raises(ConfigError):
        AleatoricConfig(mode="bogus")
    with pytest.raises(ConfigError):
        AleatoricConfig(quantile_level=1.0)


@pytest.mark.parametrize("g, a, expected", [(0.35, 0.25, 0.10), (0.20, 0.25, 0.0), (0.25, 0.25, 0.0)])
def test_epistemic_examples(g, a, expected):
    assert deup.epistemic([g], [a])[0] == pytest.approx(expected)


def test_epistemic_undefined_floor():
    out = deup.epistemic([0.3, 0.3], [np.nan, 0.1])
    assert np.isnan(out[0]) and out[1] == pytest.approx(0.2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_date_constant_floor_ordering_and_cap_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 60))
    g = rng.uniform(0, 1, size=n)
    a1, a2 = rng.uniform(0, 0.5, size=2)
    e1, e2 = deup.epistemic(g, np.full(n, a1)), deup.epistemic(g, np.full(n, a2))
    both = (e1 > 0) & (e2 > 0)
    # among rows positive under both floors the ordering matches g
    assert np.array_equal(np.argsort(e1[both], kind="mergesort"), np.argsort(g[both], kind="mergesort"))
    assert np.array_equal(np.argsort(e2[both], kind="mergesort"), np.argsort(g[both], kind="mergesort"))
    if (e1 > 0).mean() > 0.15 and (e2 > 0).mean() > 0.15:
        set1 = e1 > np.quantile(e1, 0.85)
        set2 = e2 > np.quantile(e2, 0.85)
        assert np.array_equal(set1, set2)


def test_quintile_table_constructed_and_null():
    rng = np.random.default_rng(0)
    e = rng.uniform(size=2000)
    out = deup.quintile_table(e, e + rng.normal(scale=0.01, size=2000))
    assert out["spearman"] == 1.0
    assert out["q5_q1"] > 5
    null = deup.quintile_table(e, rng.uniform(size=2000))
    assert null["q5_q1"] == pytest.approx(1.0, abs=0.15)
    with pytest.raises(DataError):
        deup.quintile_table(e[:20], e[:20])


def test_quintile_table_per_date():
    rng = np.random.default_rng(1)
    d = np.repeat(np.arange(40), 25)
    e = rng.uniform(size=d.size) + d  # pooled quintiles would just sort by date
    loss = e - d + rng.normal(scale=0.01, size=d.size)
    out = deup.quintile_table(e, loss, per_date=True, date_idx=d)
    assert out["spearman"] == 1.0
    with pytest.raises(ConfigError):
        deup.quintile_table(e, loss, per_date=True)


def test_coupling_series_identity_and_null():
    rng = np.random.default_rng(2)
    d = np.repeat(np.arange(30), 20)
    score = rng.normal(size=d.size)
    frame = pd.DataFrame({"date_idx": d, "score": score, "e": np.abs(score)})
    out = deup.coupling_series(frame, "e")
    assert np.allclose(out["series"], 1.0)
    frame["e"] = rng.uniform(size=d.size)
    assert abs(deup.coupling_series(frame, "e")["median"]) < 0.15
    frame.loc[frame["date_idx"] == 0, "e"] = 0.5
    assert 0 not in deup.coupling_series(frame, "e")["series"].index


def test_residualize_cases():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=30)
    np.testing.assert_allclose(deup.residualize_ehat(0.2 + 3 * x, x), 0.0, atol=1e-12)
    X = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    np.testing.assert_allclose(deup.residualize_ehat(y, X), normal_equations_residual(y, X), atol=1e-10)
    # orthogonal (centered, uncorrelated) covariate leaves the centered signal
    c = np.array([1.0, -1.0] * 15)
    y = 0.2 + np.repeat(np.arange(15.0), 2)
    np.testing.assert_allclose(deup.residualize_ehat(y, c), y - y.mean(), atol=1e-12)
    d = np.repeat([0, 1], 15)
    per = deup.residualize_ehat(y, c, date_idx=d)
    for u in (0, 1):
        m = d == u
        np.testing.assert_allclose(per[m], normal_equations_residual(y[m], c[m, None]), atol=1e-10)


def test_dominance_table():
    rng = np.random.default_rng(6)
    d = np.repeat(np.arange(20), 15)
    loss = rng.uniform(size=d.size)
    frame = pd.DataFrame({"date_idx": d, "rank_loss": loss, "self": loss,
                          "noise": rng.uniform(size=d.size), "period": np.where(d < 10, "DEV", "FINAL")})
    tab = deup.baseline_dominance_table(frame, {"self": "self", "noise": "noise"}, period_col="period")
    assert list(tab.columns) == ["DEV", "FINAL"]
    assert np.allclose(tab.loc["self"], 1.0)
    assert np.all(np.abs(tab.loc["noise"]) < 0.2)
    # the helper agrees with a brute-force per-date average
    brute = np.mean([brute_spearman(g["noise"].to_numpy(), g["rank_loss"].to_numpy())
                     for _, g in frame.groupby("date_idx")])
    assert deup.baseline_dominance_table(frame, {"n": "noise"}).loc["n", "ALL"] == pytest.approx(brute)


def test_prediction_table_export(tmp_path):
    panel = _toy_panel(40, 12)
    labels = make_rank_labels(panel, 20)
    folds = walk_forward_folds(panel.n_dates, 2, embargo_days=0, horizon=0, min_train_folds=1)
    g = deup.train_gx_walkforward(panel, labels, folds, gbt.GbtConfig(n_estimators=3, min_child_samples=10))
    floors = {"oracle": deup.aleatoric_baseline(labels, AleatoricConfig(mode="oracle"), panel.n_dates, 20)}
    table = deup.uncertainty_table(panel, 20, g, labels, floors)
    assert np.all(np.isnan(table["a_pit"]))
    assert np.all(table["e_oracle"].dropna() >= 0)
    path = tmp_path / "pred.csv"
    deup.write_prediction_table(table, path)
    back = pd.read_csv(path)
    assert list(back.columns) == deup.PREDICTION_COLUMNS
    assert len(back) == len(table)
