import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankguard.errors import DuplicateKey, EmptyTrainSet, IngestError
from rankguard.panel import (
    Panel,
    ingest_csv,
    make_rank_labels,
    walk_forward_folds,
    write_csv,
)


def _write(tmp_path, text):
    p = tmp_path / "panel.csv"
    p.write_text(text)
    return p


def test_ingest_three_rows(tmp_path):
    p = _write(tmp_path, "date,asset,score_primary,ret_20\n"
                         "2020-01-02,B,0.5,0.01\n2020-01-02,A,-0.2,0.03\n2020-01-02,C,0.1,-0.02\n")
    panel = ingest_csv(p)
    assert panel.dates == ["2020-01-02"]
    assert panel.frame["asset"].tolist() == ["A", "B", "C"]


def test_ingest_missing_label_is_absent(tmp_path):
    p = _write(tmp_path, "date,asset,score_primary,ret_20\n2020-01-02,A,0.5,\n2020-01-02,B,0.1,0.2\n")
    panel = ingest_csv(p)
    assert np.isnan(panel.frame.loc[0, "ret_20"])
    assert panel.frame.loc[1, "ret_20"] == 0.2


def test_ingest_duplicate_key_reports_line(tmp_path):
    p = _write(tmp_path, "date,asset,score_primary\n2020-01-02,A,1\n2020-01-03,A,2\n2020-01-02,A,3\n")
    with pytest.raises(DuplicateKey) as err:
        ingest_csv(p)
    assert err.value.line == 4


@pytest.mark.parametrize("row, line", [
    ("2020-01-02,A", 3),
    ("2020-13-02,A,1", 3),
    ("2020-01-02,A,abc", 3),
])
def test_ingest_malformed(tmp_path, row, line):
    p = _write(tmp_path, f"date,asset,score_primary\n2020-01-01,A,1\n{row}\n")
    with pytest.raises(IngestError) as err:
        ingest_csv(p)
    assert err.value.line == line


def test_ingest_requires_header_columns(tmp_path):
    p = _write(tmp_path, "date,ticker,score_primary\n2020-01-01,A,1\n")
    with pytest.raises(IngestError):
        ingest_csv(p)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=True, allow_infinity=False, width=64), min_size=6, max_size=6))
def test_roundtrip_bit_exact(tmp_path_factory, values):
    frame = pd.DataFrame({
        "date": ["2021-03-01", "2021-03-01", "2021-03-02"],
        "asset": ["X", "Y", "X"],
        "score_primary": values[:3],
        "ret_20": values[3:],
    })
    panel = Panel.from_frame(frame)
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    write_csv(panel, path)
    again = ingest_csv(path)
    for c in ["score_primary", "ret_20"]:
        a = panel.frame[c].to_numpy()
        b = again.frame[c].to_numpy()
        assert np.array_equal(np.isnan(a), np.isnan(b))
        assert a[~np.isnan(a)].tobytes() == b[~np.isnan(b)].tobytes()
    path2 = path.with_name("p2.csv")
    write_csv(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def _label_panel(scores, rets, date="2020-01-02"):
    n = len(scores)
    return Panel.from_frame(pd.DataFrame({
        "date": [date] * n,
        "asset": [f"a{i}" for i in range(n)],
        "score_primary": scores,
        "ret_20": rets,
    }))


def test_rank_loss_anchor():
    # 11 names: the target is at score rank 0.90 and return rank 0.40
    scores = np.arange(11.0)
    rets = np.arange(11.0)
    rets[9], rets[4] = 4.0, 9.0
    labels = make_rank_labels(_label_panel(scores, rets), 20)
    row = labels[labels["asset"] == "a9"].iloc[0]
    assert row.score_rank == pytest.approx(0.9)
    assert row.return_rank == pytest.approx(0.4)
    assert row.rank_loss == pytest.approx(0.5)


def test_rank_loss_identical_vectors_zero():
    v = [0.3, -0.1, 0.8, 0.2]
    labels = make_rank_labels(_label_panel(v, v), 20)
    assert np.all(labels["rank_loss"].to_numpy() == 0.0)


def test_rank_loss_five_assets_hand_ranked():
    scores = [0.5, -1.0, 2.0, 0.1, 0.7]
    rets = [0.02, 0.01, -0.03, 0.05, 0.00]
    # score order: a1 < a3 < a0 < a4 < a2 -> ranks 0.5, 0, 1, 0.25, 0.75
    # return order: a2 < a4 < a1 < a0 < a3 -> ranks 0.75, 0.5, 0, 1, 0.25
    labels = make_rank_labels(_label_panel(scores, rets), 20)
    np.testing.assert_allclose(labels["rank_loss"], [0.25, 0.5, 1.0, 0.75, 0.5])


def test_rank_loss_uses_labeled_subset_only():
    labels = make_rank_labels(_label_panel([1.0, 2.0, 3.0], [np.nan, 0.1, 0.2]), 20)
    assert labels["asset"].tolist() == ["a1", "a2"]
    np.testing.assert_array_equal(labels["score_rank"], [0.0, 1.0])


def test_rank_loss_skips_thin_dates():
    labels = make_rank_labels(_label_panel([1.0, 2.0], [np.nan, 0.1]), 20)
    assert labels.empty


@given(st.lists(st.tuples(st.integers(-9, 9), st.integers(-9, 9)), min_size=2, max_size=25))
def test_rank_loss_bounds(pairs):
    s = [p[0] for p in pairs]
    r = [p[1] for p in pairs]
    ell = make_rank_labels(_label_panel(s, r), 20)["rank_loss"].to_numpy()
    assert np.all((ell >= 0) & (ell <= 1))


def test_folds_full_scale_counts():
    plans = walk_forward_folds(2277, 109, embargo_days=90, horizon=20, min_train_folds=20)
    emitting = [p.fold_id for p in plans if p.emits_predictions]
    assert emitting == list(range(21, 110))
    assert len(emitting) == 89


def test_folds_partition_without_embargo():
    plans = walk_forward_folds(40, 4, embargo_days=0, horizon=0)
    for p in plans:
        np.testing.assert_array_equal(p.train_dates, np.arange(p.predict_start))
    covered = np.concatenate([p.predict_dates for p in plans])
    np.testing.assert_array_equal(covered, np.arange(40))


def test_folds_embargo_scan():
    embargo, horizon = 15, 20
    plans = walk_forward_folds(200, 10, embargo_days=embargo, horizon=horizon, min_train_folds=1)
    violations = 0
    for p in plans:
        for d in p.train_dates:
            if d + horizon + embargo > p.predict_start:
                violations += 1
        # purge is tight: the first excluded date really would violate
        first_out = p.train_dates[-1] + 1 if p.train_dates.size else 0
        if first_out < p.predict_start:
            assert first_out + horizon + embargo > p.predict_start
    assert violations == 0
    sizes = [p.train_dates.size for p in plans]
    assert sizes == sorted(sizes)


def test_folds_empty_train_raises():
    with pytest.raises(EmptyTrainSet):
        walk_forward_folds(100, 5, embargo_days=90, horizon=20, min_train_folds=1)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(IngestError):
        ingest_csv(tmp_path / "absent.csv")
