"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .scenegen import LAYOUTS, VTDS

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


def _config(path) -> harness.PipelineConfig:
    return harness.load_config(path) if path else harness.PipelineConfig()


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    try:
        cfg = dataclasses.replace(cfg, seed=args.seed, snapshots=args.snapshots)
    except ValueError as exc:
        raise harness.ConfigError(str(exc)) from exc
    entries = harness.generate_dataset(cfg, args.out, conditions=[(args.layout, args.vtd)])
    print(f"{len(entries)} links indexed in {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = harness.load_config(args.config) if args.config else _dataset_config(args.data)
    log_path = args.log or str(Path(args.out).with_suffix(".log.csv"))
    result = harness.run_train(args.data, cfg, args.out, log_path)
    print(f"best epoch {result.best_epoch}, checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def _dataset_config(data_dir) -> harness.PipelineConfig:
    path = Path(data_dir, "config.json")
    if not path.exists():
        raise harness.DataError(f"{path} missing")
    return harness.load_config(path)


def cmd_eval(args) -> int:
    cfg = harness.load_config(args.config) if args.config else None
    report = harness.run_eval(args.data, args.ckpt, cfg)
    Path(args.report).write_text(json.dumps({"evaluation": report}, indent=1, sort_keys=True) + "\n")
    pooled = report["pooled"]
    print(f"P = {pooled['P']:.4f} (baseline {pooled['baseline_P']:.4f}) over {pooled['clusters']} clusters")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = harness.load_config(args.config) if args.config else None
    fid = harness.run_simulate(args.data, args.ckpt, args.link, args.out, cfg)
    print(f"PDP RMSE {fid['rmse_db_test']:.2f} dB (test snapshots), outputs in {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    for path in harness.write_report_csvs(args.input):
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        try:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        except ValueError as exc:
            raise harness.ConfigError(str(exc)) from exc
    report = harness.run_pipeline(cfg, args.out)
    for key, c in report["evaluation"]["conditions"].items():
        print(f"{key:22s} P = {c['P']}  baseline = {c['baseline_P']}")
    return EXIT_OK


def cmd_config(args) -> int:
    text = json.dumps(harness.config_to_dict(harness.PipelineConfig()), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envchan", description="LiDAR scatterer recognition and channel synthesis")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate one (layout, vtd) condition")
    g.add_argument("--layout", choices=LAYOUTS, required=True)
    g.add_argument("--vtd", choices=VTDS, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--snapshots", type=int, default=100)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the recognizer on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="synthesize channels for one link")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--link", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="emit figure CSVs from a run directory")
    r.add_argument("--in", dest="input", required=True)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("run", help="full pipeline: generate, train, evaluate, synthesize")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_run)

    c = sub.add_parser("config", help="print the default configuration")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
