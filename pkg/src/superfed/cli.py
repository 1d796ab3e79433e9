"""Command-line entry point: ``superfed run ...`` and ``superfed presets``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from superfed.config import PRESETS, parse_config
from superfed.errors import ConfigError
from superfed.experiment import OUT_ROOT_ENV, execute, output_dir

# flag dest -> config key
_FLAGS = {
    "rounds": "rounds",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "clients": "clients",
    "fraction": "fraction",
    "lr": "lr",
    "mu": "mu",
    "nu": "nu",
    "scheme": "scheme",
    "personalization_start": "personalization_start",
    "partition": "partition",
    "noise": "noise",
    "seed": "seed",
    "out": "out",
    "local_init": "local_init",
    "eval_every": "eval_every",
    "plane_resolution": "plane_resolution",
}


def _start(value: str):
    return value if value == "never" else int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one simulation and write its outputs")
    r.add_argument("--config", help="JSON config document")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--rounds", type=int)
    r.add_argument("--local-epochs", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--clients", type=int)
    r.add_argument("--fraction", type=float)
    r.add_argument("--lr", type=float)
    r.add_argument("--mu", type=float)
    r.add_argument("--nu", type=float)
    r.add_argument("--scheme", choices=["mm", "lm"])
    r.add_argument("--personalization-start", type=_start, metavar="L|never")
    r.add_argument("--partition", metavar="pathological|dirichlet:ALPHA")
    r.add_argument("--noise", metavar="none|pair:EPS|symmetric:EPS")
    r.add_argument("--seed", type=int)
    r.add_argument("--local-init", choices=["fresh", "copy"])
    r.add_argument("--eval-every", type=int)
    r.add_argument("--plane-resolution", type=int)
    r.add_argument("--hidden", type=int, nargs="+", metavar="WIDTH")
    r.add_argument("--images", help="IDX image file (switches the dataset to idx)")
    r.add_argument("--labels", help="IDX label file")
    r.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<config hash>)")
    r.add_argument("--workers", type=int, default=1, help="threads for client updates")
    r.add_argument("-v", "--verbose", action="count", default=0)

    sub.add_parser("presets", help="list the built-in presets")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {key: getattr(args, dest) for dest, key in _FLAGS.items() if getattr(args, dest) is not None}
    if args.hidden:
        out["hidden"] = list(args.hidden)
    if args.images or args.labels:
        out["dataset"] = {"kind": "idx"}
        if args.images:
            out["dataset"]["images"] = args.images
        if args.labels:
            out["dataset"]["labels"] = args.labels
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name, values in PRESETS.items():
            print(f"{name:22s} {json.dumps(values, sort_keys=True)}")
        return 0

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(args.config, _overrides(args), preset=args.preset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    status = execute(cfg, workers=args.workers)
    if status == 0:
        print(output_dir(cfg))
    return status


if __name__ == "__main__":
    sys.exit(main())
