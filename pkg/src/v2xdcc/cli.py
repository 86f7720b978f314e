"""Command-line entry points: simulate, report and sweep."""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, ScenarioConfig, parse_config, with_seed
from .engine import run
from .export import ExportError, check_round_trip, export_run, report

log = logging.getLogger("v2xdcc")


def _seed_range(text: str) -> range:
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+))?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected A..B or a single seed, got {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) is not None else lo
    if hi < lo:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return range(lo, hi + 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="v2xdcc",
        description="Congestion-control simulator for V2X services (Adaptive DCC and DPA).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario and export its results")
    sim.add_argument("--config", required=True, type=Path, help="YAML scenario file")
    sim.add_argument("--seed", type=int, help="override the seed in the config")
    sim.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: results)")

    rep = sub.add_parser("report", help="recompute aggregate tables from exported results")
    rep.add_argument("--in", dest="in_dir", required=True, type=Path, help="directory written by simulate")
    rep.add_argument("--format", choices=("csv", "json"), default="json")
    rep.add_argument("--check", action="store_true",
                     help="exit 1 unless the recomputed aggregates equal summary.json")

    sw = sub.add_parser("sweep", help="run one scenario over a range of seeds")
    sw.add_argument("--config", required=True, type=Path, help="YAML scenario file")
    sw.add_argument("--seeds", required=True, type=_seed_range, help="inclusive range such as 1..5")
    sw.add_argument("--out", type=Path, default=Path("sweep"), help="parent directory (default: sweep)")
    return parser


def _simulate(config: ScenarioConfig, out: Path) -> Path:
    log.info("running %s/%s/%s seed=%d for %.1f s", config.scenario, config.mode.value,
             config.priorities.value, config.seed, config.duration)
    store = run(config)
    return export_run(store, out, config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            config = parse_config(args.config)
            if args.seed is not None:
                config = with_seed(config, args.seed)
            out = _simulate(config, args.out)
            print(out)
        elif args.command == "report":
            if args.check and not check_round_trip(args.in_dir):
                print(f"error: aggregates recomputed from {args.in_dir} differ from summary.json", file=sys.stderr)
                return 1
            sys.stdout.write(report(args.in_dir, args.format))
        else:
            base = parse_config(args.config)
            for seed in args.seeds:
                out = _simulate(with_seed(base, seed), args.out / f"seed_{seed}")
                print(out)
    except (ConfigError, ExportError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # a failed run must not look like success
        log.debug("run failed", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
