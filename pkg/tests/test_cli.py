import filecmp
import json

import pytest

from rankguard import cli


def _same_tree(a, b):
    names_a = sorted(p.name for p in a.iterdir())
    names_b = sorted(p.name for p in b.iterdir())
    assert names_a == names_b
    match, mismatch, errors = filecmp.cmpfiles(a, b, names_a, shallow=False)
    return mismatch + errors


def test_run_is_byte_deterministic(small_config, tmp_path):
    cfg = small_config(seed=5)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert _same_tree(tmp_path / "a", tmp_path / "b") == []


def test_seed_flag_changes_output(small_config, tmp_path):
    cfg = small_config()
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "1"]) == 0
    assert (tmp_path / "a" / "panel.csv").read_bytes() != (tmp_path / "b" / "panel.csv").read_bytes()
    assert _same_tree(tmp_path / "a", tmp_path / "c") == []


def test_eval_gate_and_report(small_config, tmp_path, capsys):
    cfg = small_config()
    out = tmp_path / "g"
    assert cli.main(["eval-gate", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert "G" in summary["gate"]["periods"]["ALL"]
    assert cli.main(["report", "--out", str(out)]) == 0
    assert "Gate AUROC" in capsys.readouterr().out
    assert (out / "report.txt").exists()


def test_conformal_verb(small_config, tmp_path):
    out = tmp_path / "c"
    assert cli.main(["conformal", "--config", str(small_config()), "--out", str(out), "--horizon", "20"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["conformal"]["h20"]) == {"raw", "vol", "deup_oracle", "deup_pit"}


def test_exit_codes(small_config, tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["family"] == "ConfigError" and err["exit_code"] == 2
    bad = small_config(extra='policies = ["nope"]')
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 2
    csv_cfg = tmp_path / "csv.toml"
    csv_cfg.write_text(f'[input]\nkind = "csv"\npath = "{(tmp_path / "absent.csv").as_posix()}"\n')
    assert cli.main(["run", "--config", str(csv_cfg), "--out", str(tmp_path / "x")]) == 3
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["family"] == "DataError"


def test_numerical_error_exit(small_config, tmp_path, monkeypatch):
    from rankguard import pipeline
    from rankguard.errors import UndefinedSharpe

    def boom(*args, **kwargs):
        raise UndefinedSharpe("zero variance")

    monkeypatch.setattr(pipeline, "run", boom)
    assert cli.main(["run", "--config", str(small_config()), "--out", str(tmp_path / "n")]) == 4


def test_horizon_flag_must_be_known(small_config):
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", str(small_config()), "--horizon", "30"])
