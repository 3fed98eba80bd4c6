"""Command-line entry point: ``netope simulate|ingest|evaluate|check|report``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, load_config, preset
from .conformance import format_report, run_conformance_suite
from .errors import NetopeError
from .harness import emit_report, read_aggregate_json, render_report, run_experiment, run_sweep
from .ingest import ingest

REPORT_EXT = {"csv": "csv", "json": "json", "md": "md"}


def _write_reports(rows, out: Path) -> None:
    for fmt, ext in REPORT_EXT.items():
        emit_report(rows, fmt, out / f"report.{ext}")


def cmd_simulate(args) -> int:
    base = load_config(args.config)
    out = Path(args.out or base.out_dir)
    if args.preset:
        results = run_sweep(base, preset(args.preset), args.threads, out)
    else:
        results = [run_experiment(base, args.threads, out / base.name)]
    rows = [r for res in results for r in res.rows]
    _write_reports(rows, out)
    sys.stdout.write((out / "report.md").read_text())
    return 0


def cmd_ingest(args) -> int:
    manifest = ingest(args.features, args.edges, args.pca, args.out, scale=args.scale)
    for k in sorted(manifest):
        print(f"{k}: {manifest[k]}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config).replace(graph="file", dataset=str(args.dataset))
    out = Path(args.out or cfg.out_dir)
    res = run_experiment(cfg, args.threads, out / cfg.name)
    _write_reports(res.rows, out)
    sys.stdout.write((out / "report.md").read_text())
    return 0


def cmd_check(args) -> int:
    results = run_conformance_suite(with_training=args.with_training)
    sys.stdout.write(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args) -> int:
    src = Path(args.input)
    files = [src] if src.is_file() else sorted(src.rglob("aggregate.json"))
    if not files:
        raise NetopeError(f"no aggregate.json found under {src}")
    rows = [row for f in files for row in read_aggregate_json(f)]
    fmt = "md" if args.format in ("markdown", "md") else args.format
    if args.out:
        emit_report(rows, fmt, args.out)
    else:
        sys.stdout.write(render_report(rows, fmt))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netope", description="Off-policy evaluation under network interference.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a synthetic experiment or preset sweep")
    s.add_argument("--config", help="flat YAML config (defaults apply to missing keys)")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--out", help="output directory (default: config out_dir)")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="PCA-reduce a feature/edge dataset")
    s.add_argument("--features", required=True)
    s.add_argument("--edges", required=True)
    s.add_argument("--pca", type=int, default=10)
    s.add_argument("--scale", action="store_true", help="standardize features before PCA")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("evaluate", help="run estimators on a prepared dataset directory")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("check", help="run the conformance suite")
    s.add_argument("--with-training", action="store_true", help="also train the density-ratio toy classifier (about 10 s)")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("report", help="render aggregate results")
    s.add_argument("--in", dest="input", required=True, help="run directory or aggregate.json")
    s.add_argument("--format", choices=("csv", "json", "md", "markdown"), default="md")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NetopeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
