"""Command line entry point: ``gauntlet run|report|scenarios``."""

from __future__ import annotations

import argparse
import sys
import time

from .config import PRESETS, load_config
from .harness import TraceError, format_summary, report, run
from .model import ConfigError

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gauntlet", description="Incentive-mechanism simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a seeded experiment")
    p_run.add_argument("--config", help="key = value config file")
    p_run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable), e.g. --set scenario=figure2")
    p_run.add_argument("--out", required=True, help="output directory")

    p_report = sub.add_parser("report", help="summarize a trace.csv")
    p_report.add_argument("--trace", required=True)

    p_sc = sub.add_parser("scenarios", help="built-in presets")
    p_sc.add_argument("action", choices=["list"])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "scenarios":
        for name, values in PRESETS.items():
            print(f"{name}: {values['peers.roster']}")
        return 0
    if args.command == "report":
        try:
            print(format_summary(report(args.trace)), end="")
        except (TraceError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return 0

    try:
        config = load_config(args.config, args.set)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    started = time.perf_counter()
    try:
        trace = run(config, args.out)
    except Exception as exc:  # noqa: BLE001 - any failure mid-run maps to one exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {trace} ({config.rounds} rounds, {time.perf_counter() - started:.1f}s)")
    print(format_summary(report(trace)), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
