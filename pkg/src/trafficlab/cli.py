"""Command-line entry point: ``trafficlab <command> [--config ...]``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
solver fails to converge or a fluid schedule is unstable.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigInvalid, build_config
from .fluid import InvalidParams, UnstableSchedule
from .harness import COMMANDS, run_experiment
from .mdp import NonConvergence
from .nn import CheckpointIncompatible

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trafficlab", description="Traffic-light control experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON experiment file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--checkpoint", help="agent checkpoint directory (eval)")
        p.add_argument("--trajectory", help="trajectory CSV (detect-greenwave)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.override)
    if args.checkpoint:
        overrides.append(f"checkpoint={args.checkpoint}")
    if args.trajectory:
        overrides.append(f"trajectory={args.trajectory}")
    try:
        cfg = build_config(args.config, overrides, args.seed)
        report = run_experiment(cfg, args.command, args.out)
    except (ConfigInvalid, InvalidParams, CheckpointIncompatible) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence, UnstableSchedule) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    print(f"{args.command}: wrote {args.out}/metrics.json")
    m = report["metrics"]
    for key in ("avg_queue_length", "discounted_cost", "synchrony_index"):
        if key in m:
            print(f"  {key} = {m[key]}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
