"""Command-line entry point.

    rankguard generate  --config cfg.toml [--out DIR] [--seed N]
    rankguard run       --config cfg.toml [--out DIR] [--seed N] [--horizon H]
    rankguard eval-gate --config cfg.toml ...
    rankguard conformal --config cfg.toml ...
    rankguard report    --out DIR

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, DataError, NumericalError, RankGuardError

logger = logging.getLogger("rankguard")

VERBS = ("generate", "run", "eval-gate", "conformal", "report")


def build_parser():
    p = argparse.ArgumentParser(prog="rankguard", description=__doc__.split("\n")[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--horizon", type=int, choices=(20, 60, 90), help="evaluate a single horizon")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _attach_log(out_dir, verbose):
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("rankguard")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(handler)
    return handler


def _fmt(v, spec=".3f"):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return format(v, spec)
    return str(v)


def render_report(summary):
    """Plain-text tables from a summary.json payload."""
    lines = [f"seed {summary.get('seed')}  dev_end {summary.get('dev_end')}  "
             f"dates {summary.get('n_dates')}  rows {summary.get('n_rows')}", ""]
    for h, block in sorted(summary.get("rankic_panel", {}).items()):
        lines.append(f"RankIC {h}: period  mean  median  stability  pct_pos")
        for period, r in block.items():
            lines.append(f"  {period:<6} {_fmt(r['mean'], '.4f')} {_fmt(r['median'], '.4f')} "
                         f"{_fmt(r['stability'])} {_fmt(r['pct_positive'])}")
    for h, block in sorted(summary.get("quintiles", {}).items()):
        for col, periods in block.items():
            for period, q in periods.items():
                if "means" in q:
                    means = " ".join(_fmt(m, ".4f") for m in q["means"])
                    lines.append(f"Quintiles {h} {col} {period}: {means}  Q5/Q1 {_fmt(q['q5_q1'])}")
    gate_block = summary.get("gate", {}).get("periods", {})
    for period, preds in gate_block.items():
        lines.append(f"Gate AUROC ({period}):")
        for name, res in preds.items():
            lines.append(f"  {name:<24} {_fmt(res.get('auroc'))}")
    for name, reps in summary.get("policies", {}).items():
        row = "  ".join(f"{p} {_fmt(r.get('sharpe_ann'), '.2f')}" for p, r in reps.items())
        lines.append(f"Policy {name:<20} Sharpe {row}  crisis_dd {_fmt(reps['ALL'].get('crisis_max_dd'))}")
    for floor, r in summary.get("deployability", {}).items():
        lines.append(f"Floor {floor:<7} cap identity {_fmt(r['capped_set_identity'])}  "
                     f"bit-identical {r['pnl_bit_identical_to_oracle']}")
    for h, block in sorted(summary.get("conformal", {}).items()):
        for name, periods in block.items():
            r = periods.get("ALL", {})
            if "marginal" in r:
                lines.append(f"Conformal {h} {name:<12} marginal {_fmt(r['marginal'])}  "
                             f"spread {_fmt(r['spread'])}  width {_fmt(r['mean_width'])}")
    return "\n".join(lines) + "\n"


def _report(out_dir):
    path = out_dir / "summary.json"
    if not path.exists():
        raise ConfigError(f"no summary.json in {out_dir}; run the pipeline first")
    text = render_report(json.loads(path.read_text()))
    (out_dir / "report.txt").write_text(text)
    sys.stdout.write(text)


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = None
    try:
        if args.verb == "report":
            if not args.out:
                if not args.config:
                    raise ConfigError("report needs --out or --config")
                args.out = load_config(args.config).out
            _report(Path(args.out))
            return 0
        if not args.config:
            raise ConfigError(f"{args.verb} needs --config")
        overrides = {"seed": args.seed, "horizons": [args.horizon] if args.horizon else None}
        cfg = load_config(args.config, overrides)
        out = Path(args.out or cfg.out)
        handler = _attach_log(out, args.verbose)
        if args.verb == "generate":
            result = pipeline.generate(cfg, out)
        elif args.verb == "run":
            pipeline.run(cfg, out)
            result = {"out": str(out)}
        elif args.verb == "eval-gate":
            pipeline.eval_gate(cfg, out)
            result = {"out": str(out)}
        else:
            pipeline.run_conformal(cfg, out)
            result = {"out": str(out)}
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
        return 0
    except RankGuardError as exc:
        family = next((c.__name__ for c in (ConfigError, DataError, NumericalError) if isinstance(exc, c)),
                      "RankGuardError")
        report = {"error": type(exc).__name__, "family": family,
                  "message": str(exc), "exit_code": exc.exit_code}
        logger.error("%s: %s", type(exc).__name__, exc)
        sys.stderr.write(json.dumps(report, sort_keys=True) + "\n")
        return exc.exit_code
    finally:
        if handler is not None:
            logging.getLogger("rankguard").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
