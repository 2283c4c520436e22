"""Run the full pipeline on both shipped configurations and print the reports.

    python scripts/full_run.py [--out runs]
"""
import argparse
import sys
from pathlib import Path

from rankguard import cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "runs"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for name in ("default", "collapse"):
        out = Path(args.out) / name
        code = cli.main(["run", "--config", str(ROOT / "configs" / f"{name}.toml"),
                         "--out", str(out), "--seed", str(args.seed)])
        if code:
            return code
        cli.main(["report", "--out", str(out)])
    return 0


if __name__ == "__main__":
    sys.exit(main())
