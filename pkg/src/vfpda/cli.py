"""Command line entry point: ``vfpda run|sweep|report``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .harness import (ConfigError, ExperimentConfig, collect_reports, load_grid, run_experiment,
                      run_sweep, with_seed_offset)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="vfpda", description="VFP twin experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("config")
        s.add_argument("--seed-offset", type=int, default=0)
        s.add_argument("--output")
        s.add_argument("--method")
        s.add_argument("--nens", type=int)
        if name == "sweep":
            s.add_argument("--grid", required=True)
    r = sub.add_parser("report")
    r.add_argument("results")
    return p


def _configure(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.method:
        cfg = cfg.replace("method.name", args.method)
    if args.nens is not None:
        cfg = cfg.replace("ensemble.n_ens", args.nens)
    if args.seed_offset:
        cfg = with_seed_offset(cfg, args.seed_offset)
    if args.output:
        cfg = dataclasses.replace(cfg, output=dataclasses.replace(cfg.output,
                                                                  directory=args.output))
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        rows = collect_reports(args.results)
        if not rows:
            print(f"no results under {args.results}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{'name':40s} {'method':12s} {'rmse':>8s} {'chi2':>9s} status")
        for row in rows:
            rm = "nan" if row["mean_rmse"] is None else f"{row['mean_rmse']:.4f}"
            c2 = "-" if row["rank_chi_square"] is None else f"{row['rank_chi_square']:.1f}"
            print(f"{row['name']!s:40s} {row['method']!s:12s} {rm:>8s} {c2:>9s} {row['status']}")
        return EXIT_OK
    try:
        cfg = _configure(args)
        grid = load_grid(args.grid) if args.command == "sweep" else None
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if grid is None:
            summary = run_experiment(cfg)
            status = summary["status"]
            print(json.dumps({"name": summary["name"], "mean_rmse": summary["mean_rmse"],
                              "status": status}, sort_keys=True))
        else:
            result = run_sweep(cfg, grid)
            status = "ok" if all(p["status"] == "ok" for p in result["points"]) else "partial"
            for p in result["points"]:
                print(json.dumps(p["point"], sort_keys=True), p["mean_rmse"], p["rank_chi_square"])
    except Exception as exc:  # runtime failure after a valid config
        logging.getLogger("vfpda").exception("run failed: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK if status == "ok" else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
