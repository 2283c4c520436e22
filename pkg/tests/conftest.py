import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

SMALL_TOML = """
seed = {seed}
horizons = [20]
out = "{out}"
{extra}

[input]
kind = "synthetic"

[input.script]
universe_size = 30

[[input.script.segments]]
n_dates = 200
target_ic = 0.15
stress_level = 0.3

[[input.script.segments]]
n_dates = 200
target_ic = 0.05
stress_level = 0.5

[folds]
n_folds = 10
embargo_days = 90
min_train_folds = 4

[gbt]
n_estimators = 20
min_child_samples = 30
"""


@pytest.fixture
def small_config(tmp_path):
    """Write a small two-segment run configuration and return its path."""

    def make(seed=0, extra="", name="small.toml"):
        path = tmp_path / name
        path.write_text(SMALL_TOML.format(seed=seed, out=(tmp_path / "run").as_posix(), extra=extra))
        return path

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
