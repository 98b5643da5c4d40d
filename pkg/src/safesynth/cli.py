"""Command-line front end.

    synth run <config.json> [--out DIR] [--seed U64] [--threads N]
    synth validate <config.json>
    synth presets

Exit codes: 0 success, 2 config error, 3 infeasible synthesis,
4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (ConfigError, load_config, preset_names, preset_path,
                          run, validate_config)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4


def _resolve_config(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    if not arg.endswith(".json"):
        return preset_path(arg)
    raise ConfigError(f"config file not found: {arg}")


def _cmd_run(args) -> int:
    try:
        cfg = load_config(_resolve_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = run(cfg, output_dir=args.out, threads=args.threads, seed=args.seed)
    status = summary.results.get("status", "ok")
    out_dir = args.out or cfg.raw.get("output_dir", "runs/" + cfg.experiment)
    print(f"experiment: {cfg.experiment}")
    print(f"status    : {status}")
    for name, meta in summary.files.items():
        print(f"wrote {out_dir}/{name} ({meta['rows']} rows, sha256 {meta['sha256'][:12]}...)")
    print(f"wrote {out_dir}/summary.json")
    if status in ("ok", "optimal"):
        return EXIT_OK
    if status == "infeasible":
        return EXIT_INFEASIBLE
    return EXIT_SOLVER


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(_resolve_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {args.config} ({cfg.experiment})")
    return EXIT_OK


def _cmd_presets(args) -> int:
    for name in preset_names():
        with open(preset_path(name), encoding="utf-8") as fh:
            experiment = json.load(fh).get("experiment", "?")
        print(f"{name}: {experiment}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="synth",
        description="Safe output-feedback controller synthesis from data: "
                    "experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config (file or preset name)")
    p_run.add_argument("config", help="path to a config JSON or a preset name")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--threads", type=int, default=1, help="worker pool size")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="schema-check a config without running")
    p_val.add_argument("config", help="path to a config JSON or a preset name")
    p_val.set_defaults(func=_cmd_validate)

    p_pre = sub.add_parser("presets", help="list embedded preset configs")
    p_pre.set_defaults(func=_cmd_presets)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
