"""Command-line entry point.

    locsched run CONFIG [--seed N] [--out DIR] [--strategy NAME ...]
    locsched compare REPORT_A REPORT_B [--a NAME] [--b NAME]
    locsched gen-trace CONFIG --out FILE [--seed N]
    locsched presets [--write DIR]
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import yaml

from locsched.experiment import (ConfigError, compare, format_compare, load_config, load_report, preset_configs,
                                 replication_seed, run)
from locsched.workload import generate, write_trace

EXIT_CONFIG = 2


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strategy:
        cfg = cfg.with_strategies(args.strategy)
    return cfg


def cmd_run(args):
    cfg = _apply_overrides(load_config(args.config), args)
    out = args.out or os.path.join("runs", cfg.name)
    report = run(cfg, out_dir=out)
    print(report.summary())
    print(f"report hash {report.hash()}")
    print(f"outputs written to {out}")
    return 0


def cmd_compare(args):
    a, b = load_report(args.report_a), load_report(args.report_b)
    try:
        table = compare(a, b, args.a, args.b)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(format_compare(table))
    if args.json:
        print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def cmd_gen_trace(args):
    cfg = load_config(args.config)
    if cfg.workload is None:
        raise ConfigError("config replays a trace file; nothing to generate")
    seed = args.seed if args.seed is not None else cfg.seed
    wl = dataclasses.replace(cfg.workload, seed=replication_seed(seed, args.replication))
    events = generate(wl, cfg.catalog)
    write_trace(args.out, events)
    print(f"{len(events)} root invocations written to {args.out}")
    return 0


def cmd_presets(args):
    presets = preset_configs()
    if args.write:
        os.makedirs(args.write, exist_ok=True)
        for name, data in presets.items():
            path = os.path.join(args.write, f"{name}.yaml")
            with open(path, "w") as fh:
                yaml.safe_dump(data, fh, sort_keys=False)
            print(path)
        return 0
    for name, data in presets.items():
        wl = data["workload"]
        strategies = ",".join(s["strategy"] for s in data["strategies"])
        print(f"{name:<10} workload={wl['preset']:<10} strategies={strategies}  predictor={data['predictor']['kind']}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="locsched", description="Locality-aware serverless scheduling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (default runs/<name>)")
    r.add_argument("--strategy", action="append", help="only run this strategy (repeatable)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="relative improvement of one report over another")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--a", help="strategy in report A")
    c.add_argument("--b", help="strategy in report B")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-trace", help="write the generated root trace as JSON lines")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--replication", type=int, default=0)
    g.set_defaults(func=cmd_gen_trace)

    s = sub.add_parser("presets", help="list (or write out) the built-in experiment configs")
    s.add_argument("--write", metavar="DIR")
    s.set_defaults(func=cmd_presets)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
