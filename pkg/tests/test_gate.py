import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_ewma, brute_expanding_z
from rankguard import gate, synthetic
from rankguard.errors import ConfigError, UndefinedAUROC
from rankguard.gate import GateConfig
from rankguard.panel import Panel
from rankguard.synthetic import RegimeScript, Segment


def _panel(n_dates, n_assets, fill):
    dates = pd.bdate_range("2021-01-01", periods=n_dates).strftime("%Y-%m-%d")
    frame = pd.DataFrame({
        "date": np.repeat(dates, n_assets),
        "asset": np.tile([f"x{i:02d}" for i in range(n_assets)], n_dates),
    })
    for k, v in fill.items():
        frame[k] = v
    return Panel.from_frame(frame)


@pytest.fixture(scope="module")
def small_collapse():
    script = RegimeScript([Segment(160, 0.3, stress_level=0.4), Segment(120, -0.1, stress_level=0.4),
                           Segment(120, 0.3, stress_level=0.4)], universe_size=25, seed=7)
    return script, synthetic.generate(script)


def test_gate_algebra_exact():
    assert gate.gate_value(0.3) == 0.0
    assert gate.gate_value(0.5) == 0.5
    assert gate.gate_value(0.7) == 1.0
    assert gate.gate_value(0.1) == 0.0 and gate.gate_value(0.95) == 1.0
    assert np.isnan(gate.gate_value(np.nan))


def test_zero_health_is_active():
    frame = gate.health_and_gate(np.zeros(3), np.full(3, np.nan), np.full(3, np.nan))
    # constant efficacy gives z = 0 after warm-up, so h_raw = 0 and H = 0.5
    assert frame["H"].tolist() == [0.5, 0.5, 0.5]
    assert frame["G"].tolist() == [0.5, 0.5, 0.5]
    assert frame["active"].tolist() == [True, True, True]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_gate_monotone_in_h(hs):
    hs = np.sort(np.asarray(hs))
    g = gate.gate_value(hs)
    assert np.all(np.diff(g) >= 0)
    assert np.all((g >= 0) & (g <= 1))


def test_config_validation():
    with pytest.raises(ConfigError):
        GateConfig(drift_weights=(0.5, 0.3, 0.3))
    with pytest.raises(ConfigError):
        GateConfig(theta=1.0)


def test_matured_stream_examples():
    ic = np.arange(25.0)
    np.testing.assert_array_equal(gate.matured_ic_stream(ic, 0), ic)
    out = gate.matured_ic_stream(ic, 20)
    assert np.isfinite(out).sum() == 5
    np.testing.assert_array_equal(out[20:], ic[:5])


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(40))), st.integers(0, 39))
def test_matured_stream_index_audit(perm, tau):
    ic = np.asarray(perm, dtype=float)
    out = gate.matured_ic_stream(ic, tau)
    for t in range(ic.size):
        if np.isfinite(out[t]):
            src = int(np.flatnonzero(ic == out[t])[0])
            assert src == t - tau


def test_h_real_matches_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=80)
    x[:10] = np.nan
    np.testing.assert_allclose(gate.h_real(x, 30, 20), brute_ewma(x, 30, 20), equal_nan=True, atol=1e-12)
    np.testing.assert_allclose(gate.h_real(np.full(40, 0.2), 30, 20)[19:], 0.2)


def test_drift_components_examples():
    rng = np.random.default_rng(1)
    n_dates, n_assets = 70, 12
    base = rng.normal(size=n_assets)
    fill = {
        "score_primary": np.tile(base, n_dates),
        "vol_20d": 0.2 + 0.01 * rng.normal(size=n_dates * n_assets),
        "ret_1d": np.repeat(rng.normal(size=n_dates), n_assets) * np.tile(np.linspace(1, 2, n_assets), n_dates),
    }
    panel = _panel(n_dates, n_assets, fill)
    # identical score cross-sections: KS statistic is exactly zero
    sd = gate.score_drift(panel, window=60)
    assert np.all(np.isnan(sd[:60])) and np.all(sd[60:] == 0.0)
    # returns that are positive multiples of one series are perfectly correlated
    cs = gate.correlation_spike(panel, window=20)
    assert np.all(np.isnan(cs[:19]))
    np.testing.assert_allclose(cs[19:], 1.0)
    fd = gate.feature_drift(panel, window=252, min_history=20)
    assert np.nanmax(fd) < 5 and np.nanmedian(fd) < 2


def test_drift_renormalizes_undefined_components():
    panel = _panel(30, 5, {"score_primary": np.arange(150.0) % 7, "ret_1d": np.arange(150.0) % 5})
    cfg = GateConfig(drift_min_history=5, score_ref_window=60, corr_window=20)
    out = gate.h_drift(panel, cfg)
    # score drift has no reference yet; feature drift has no features;
    # what is left is the correlation spike at full weight
    np.testing.assert_allclose(out, gate.correlation_spike(panel, 20), equal_nan=True)


def test_disagreement_examples():
    rng = np.random.default_rng(2)
    s = rng.normal(size=50)
    panel = _panel(5, 10, {"score_primary": s, "score_secondary": s})
    np.testing.assert_allclose(gate.h_disagree(panel), 0.0, atol=1e-12)
    panel = _panel(5, 10, {"score_primary": s, "score_secondary": -s})
    np.testing.assert_allclose(gate.h_disagree(panel), 2.0)
    # fallback: each date is a permutation of the same values, so dispersion is constant
    v = np.tile(np.arange(10.0), 5)
    panel = _panel(5, 10, {"score_primary": v})
    np.testing.assert_allclose(gate.h_disagree(panel, secondary=None), 0.0, atol=1e-12)


def test_health_manual_trace():
    rng = np.random.default_rng(3)
    real = rng.normal(size=12)
    real[:2] = np.nan
    drift = rng.normal(size=12)
    dis = rng.normal(size=12)
    dis[5] = np.nan
    cfg = GateConfig()
    frame = gate.health_and_gate(real, drift, dis, cfg)
    zr = brute_expanding_z(real, 2, 1e-9)
    zd = brute_expanding_z(drift, 2, 1e-9)
    zq = brute_expanding_z(dis, 2, 1e-9)
    t = 9
    h = np.nan_to_num(zr[t]) - 0.3 * np.nan_to_num(zd[t]) - 0.3 * np.nan_to_num(zq[t])
    H = 1 / (1 + np.exp(-h))
    assert frame.loc[t, "h_raw"] == pytest.approx(h, abs=1e-12)
    assert frame.loc[t, "H"] == pytest.approx(H, abs=1e-12)
    assert frame.loc[t, "G"] == pytest.approx(min(max((H - 0.3) / 0.4, 0), 1), abs=1e-12)
    # warm-up rows are undefined throughout
    assert frame.loc[:1, ["h_raw", "H", "G", "h_drift"]].isna().all().all()
    assert frame.loc[0, "active"] is None


def test_theta_monotone_active_set():
    rng = np.random.default_rng(4)
    real = rng.normal(size=200)
    a = gate.health_and_gate(real, rng.normal(size=200), rng.normal(size=200), GateConfig(theta=0.2))
    b = gate.health_and_gate(real, rng.normal(size=200), rng.normal(size=200), GateConfig(theta=0.6))
    act_a = a["G"] >= 0.2
    act_b = a["G"] >= 0.6
    assert np.all(act_a[act_b])
    assert b["active"].tolist() == (b["G"] >= 0.6).tolist()


def test_evaluate_gate_examples():
    rng = np.random.default_rng(5)
    ic = rng.normal(size=400)
    good = (ic > 0).astype(float)
    res = gate.evaluate_gate(good, ic, theta=0.5)
    assert res["auroc"] == 1.0 and res["precision"] == 1.0 and res["recall"] == 1.0
    assert res["confusion"]["fp"] == 0
    res = gate.evaluate_gate(rng.uniform(size=400), ic)
    assert abs(res["auroc"] - 0.5) < 0.08
    assert sum(b["n"] for b in res["buckets"]) == 400
    with pytest.raises(UndefinedAUROC):
        gate.evaluate_gate(rng.uniform(size=10), np.ones(10))


def test_evaluate_gate_bucket_ties_use_tiebreak():
    G = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])
    H = np.array([0.1, 0.2, 0.25, 0.29, 0.8, 0.75, 0.9, 0.71])
    ic = np.array([-0.4, -0.3, -0.2, -0.1, 0.3, 0.2, 0.4, 0.1])
    res = gate.evaluate_gate(G, ic, tiebreak=H)
    assert [b["mean_rank_ic"] for b in res["buckets"]] == pytest.approx([-0.35, -0.15, 0.15, 0.35])
    assert res["bucket_spearman"] == 1.0


def test_vix_baseline_examples():
    out = gate.vix_gate_baseline(np.full(300, 0.5))
    assert out["active"].dropna().all()
    stress = np.random.default_rng(0).uniform(0.1, 0.5, size=300)
    stress[-20:-12] = 0.0
    stress[-12:] = 1.0  # 12 of the last 20 days spike above the rolling threshold
    out = gate.vix_gate_baseline(stress)
    assert out["frac_above"].iloc[-1] == pytest.approx(0.6)
    assert out["active"].iloc[-1] is not None and not out["active"].iloc[-1]
    assert out["score"].iloc[-1] == pytest.approx(0.4)


def test_gate_prefix_recompute(small_collapse):
    _, panel = small_collapse
    full = gate.compute_gate(panel, 20)
    for last in (25, 60, 61, 140, 200, 333, panel.n_dates - 1):
        part = gate.compute_gate(panel.truncate(last), 20)
        pd.testing.assert_frame_equal(part, full.iloc[: last + 1], check_exact=True)


def test_collapse_raises_abstention(small_collapse):
    script, panel = small_collapse
    frame = gate.compute_gate(panel, 20)
    inactive = frame["active"].map(lambda v: np.nan if v is None else float(not v))
    warm = 20 + 20
    healthy = inactive.iloc[warm:160].mean()
    collapsed = inactive.iloc[180:280].mean()
    assert collapsed > healthy


def test_gate_csv(tmp_path, small_collapse):
    _, panel = small_collapse
    frame = gate.compute_gate(panel, 20)
    path = tmp_path / "gate.csv"
    gate.write_gate_csv(frame, path)
    back = pd.read_csv(path)
    assert list(back.columns) == gate.GATE_COLUMNS
    assert set(back["active"].dropna().unique()) <= {0, 1}


def test_vix_baseline_ranked_input():
    pct = np.r_[np.full(30, 0.2), np.full(30, 0.9)]
    out = gate.vix_gate_baseline(pct, window=20, ranked=True)
    assert out["frac_above"].iloc[19] == 0.0
    assert out["frac_above"].iloc[-1] == 1.0
    assert not out["active"].iloc[-1]
    assert out["active"].iloc[:19].isna().all()
