"""Command-line entry point: ``petslice <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from .pipeline import (
    ConfigError,
    Experiment,
    StageError,
    compare_reports,
    format_table,
    load_config,
    summary_table,
    write_comparison,
    write_summary,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def build_parser():
    parser = argparse.ArgumentParser(prog="petslice", description="PET/CT slice classification experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cell=False):
        p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", type=Path, help="override output_dir")
        p.add_argument("--force", action="store_true", help="ignore cached stages")
        p.add_argument("-v", "--verbose", action="store_true")
        if cell:
            p.add_argument("--cell", action="append", help="grid cell, e.g. patient-CAG (repeatable)")
        return p

    common(sub.add_parser("generate", help="generate both phantom cohorts"))
    common(sub.add_parser("preprocess", help="build the slice datasets"))
    common(sub.add_parser("split", help="write split manifests"), cell=True)
    common(sub.add_parser("train", help="train models"), cell=True)
    common(sub.add_parser("evaluate", help="score test sets and write reports"), cell=True)
    common(sub.add_parser("grid", help="run every grid cell and write the summary table"), cell=True)

    cmp_ = sub.add_parser("compare", help="compare evaluation reports")
    cmp_.add_argument("reports", nargs="+", type=Path)
    cmp_.add_argument("--out", type=Path, default=Path("comparison"))
    cmp_.add_argument("--force", action="store_true", help="allow reports from different configs")
    cmp_.add_argument("-v", "--verbose", action="store_true")
    return parser


def _experiment(args):
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    cfg = load_config(args.config, overrides)
    return Experiment(cfg, force=args.force)


def _cells(args, exp):
    return args.cell or exp.cfg["grid"]["cells"]


def run(args):
    if args.command == "compare":
        if len(args.reports) < 2:
            raise ConfigError("compare needs at least two reports")
        missing = [str(p) for p in args.reports if not p.exists()]
        if missing:
            raise ConfigError(f"report(s) not found: {', '.join(missing)}")
        try:
            comparison = compare_reports(args.reports, force=args.force)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        print(write_comparison(args.out, comparison))
        return EXIT_OK

    exp = _experiment(args)
    exp.write_config()
    if args.command == "generate":
        for which in ("internal", "external"):
            path, h = exp.phantom(which)
            print(f"{which}: {path} ({h})")
    elif args.command == "preprocess":
        modes = sorted({c.split("-")[2] if c.count("-") == 2 else exp.cfg["preprocess"]["input_mode"]
                        for c in exp.cfg["grid"]["cells"]})
        for mode in modes:
            path, _ = exp.dataset(mode)
            print((path / "summary.txt").read_text(), end="")
    elif args.command == "split":
        for cell in _cells(args, exp):
            man = exp.split(cell)
            print(f"{cell}: " + ", ".join(f"{k}={v['n_samples']}" for k, v in man.summary().items()))
    elif args.command == "train":
        for cell in _cells(args, exp):
            print(f"{cell}: {exp.train(cell)}")
    elif args.command == "evaluate":
        reports = exp.run_cells(_cells(args, exp))
        print(format_table(summary_table(reports)))
    elif args.command == "grid":
        reports = exp.run_cells(_cells(args, exp))
        table = summary_table(reports)
        write_summary(exp.out, table, exp.hash)
        print(format_table(table))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
