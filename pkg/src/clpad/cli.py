"""Command line: ``clpad run|report|synth-stream|validate``.

Failures print a single JSON line ``{"error": ..., "key": ..., "message": ...}``
on stderr and exit with status 2 (usage and configuration) or 1 (runtime).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    print(json.dumps({"valid": True, "method": cfg.method, "strategy": cfg.strategy}))
    return 0


def _apply_overrides(cfg, args):
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "device", None) is not None:
        changes["device"] = args.device
    if getattr(args, "output", None) is not None:
        changes["output"] = str(args.output)
    return cfg.replace(**changes) if changes else cfg


def _cmd_run(args) -> int:
    from .runner import run_dirname, run_experiment

    cfg = _apply_overrides(load_config(args.config), args)
    for seed in cfg.seeds:
        run_experiment(cfg, seed)
        print(Path(cfg.output) / run_dirname(cfg, seed))
    return 0


def _cmd_report(args) -> int:
    from .runner import load_records, report

    records = load_records(args.results_dir)
    out = report(records, args.output or args.results_dir)
    print(out["table"])
    return 0


def _cmd_synth(args) -> int:
    from .taskstream import make_synthetic_stream, save_mvtec_layout

    stream = make_synthetic_stream(args.n_tasks, args.n_train, args.n_test, (args.size, args.size),
                                   args.seed if args.seed is not None else 0,
                                   noise_std=args.noise_std, defect_shift=args.defect_shift)
    root = save_mvtec_layout(stream, args.output or "synthetic_stream")
    print(json.dumps({"root": str(root), "categories": stream.names}))
    return 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clpad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"clpad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, help="override the seed list with one seed")
        p.add_argument("--device", help="torch device")
        p.add_argument("--output", type=Path, help="output directory")

    p = sub.add_parser("run", help="train and evaluate one config")
    p.add_argument("config", type=Path)
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="table and curves from a results directory")
    p.add_argument("results_dir", type=Path)
    common(p)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("synth-stream", help="write a synthetic stream in MVTec layout")
    p.add_argument("--n-tasks", type=int, default=3)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=3.0)
    p.add_argument("--defect-shift", type=int, default=96)
    common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config", type=Path)
    common(p)
    p.set_defaults(func=_cmd_validate)
    return parser


def _fail(kind: str, message: str, key=None, code: int = 1) -> int:
    print(json.dumps({"error": kind, "key": key, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), code=2)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), exc.key, code=2)
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one line per failure
        return _fail(type(exc).__name__, str(exc).replace("\n", " "))


if __name__ == "__main__":
    sys.exit(main())
