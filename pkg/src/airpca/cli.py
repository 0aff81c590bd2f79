"""Command-line entry point: ``airpca run | sweep | validate-bounds``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bounds import bounds_report
from .harness import VARIANTS, ExperimentConfig, run, sweep, write_run_outputs, write_sweep_csv


def _parse_values(text: str) -> list:
    """Comma-separated values; each is parsed as JSON when possible (numbers, null), else kept as text."""
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(json.loads(item))
        except json.JSONDecodeError:
            out.append(item)
    return out


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.variant:
        cfg = cfg.replace(variant=args.variant)
    metrics, summary = run(cfg, seed=args.seed)
    write_run_outputs(metrics, summary, args.out)
    print(f"final objective {summary.final_objective:.6g}, error ratio {summary.error_ratio:.4g}, wrote {args.out}")
    return 1 if summary.diverged else 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else list(cfg.seeds)
    rows = sweep(cfg, args.axis, _parse_values(args.values), seeds, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    print(f"{len(rows)} sweep rows written to {out / 'sweep.csv'}")
    return 0


def cmd_validate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    report = bounds_report(cfg, theorem1_seeds=range(args.t1_seeds), theorem2_seeds=range(args.t2_seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bounds_report.json").write_text(json.dumps(report, indent=2))
    failed = [r for r in report["records"] if r["verdict"] == "fail"]
    for r in report["records"]:
        print(f"{r['check']:9s} {r['verdict']:8s} bound={r['bound']} mean={r['empirical_mean']:.4g}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airpca", description="Federated PCA over noisy analog aggregation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--variant", choices=VARIANTS)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="out")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep one config field over values and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, help="dotted config field, e.g. channel.G")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate-bounds", help="Monte Carlo checks of the descent bounds")
    v.add_argument("--config", required=True)
    v.add_argument("--t1-seeds", type=int, default=30)
    v.add_argument("--t2-seeds", type=int, default=200)
    v.add_argument("--out", default="out")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
