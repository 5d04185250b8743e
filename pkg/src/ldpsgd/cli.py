"""Command line entry point: ``ldpsgd {run,compare-mechanisms,clipping-bias,ingest-run}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigurationError
from .experiments import (
    FULL_SCALE,
    RECIPES,
    ClippingConfig,
    ComparisonConfig,
    ExperimentConfig,
    IngestConfig,
    recipe_config,
    run_clipping_bias,
    run_experiment,
    run_ingest,
    run_mechanism_comparison,
)

COMMANDS = {
    "run": (ExperimentConfig, run_experiment),
    "compare-mechanisms": (ComparisonConfig, run_mechanism_comparison),
    "clipping-bias": (ClippingConfig, run_clipping_bias),
    "ingest-run": (IngestConfig, run_ingest),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpsgd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--recipe", choices=sorted(k for k, (kind, _) in RECIPES.items() if kind == name),
                       help="built-in config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (grid cells run in parallel)")
        p.add_argument("--paper-scale", action="store_true",
                       help=f"n={FULL_SCALE['n']}, {FULL_SCALE['replications']} replications")
        p.add_argument("--n", type=int, help="override the stream length")
        p.add_argument("--replications", type=int, help="override the replication count")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("recipes", help="list built-in configs")
    return parser


def load_config(args):
    factory, _ = COMMANDS[args.command]
    if args.config and args.recipe:
        raise ConfigurationError("pass either --config or --recipe, not both")
    if args.recipe:
        _, cfg = recipe_config(args.recipe)
    elif args.config:
        with open(args.config) as fh:
            cfg = factory.from_dict(json.load(fh))
    else:
        cfg = factory()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.paper_scale and hasattr(cfg, "n"):
        cfg.n = FULL_SCALE["n"]
    if args.paper_scale:
        cfg.replications = FULL_SCALE["replications"]
    if args.n is not None:
        if not hasattr(cfg, "n"):
            raise ConfigurationError("--n does not apply to ingest runs")
        cfg.n = args.n
    if args.replications is not None:
        cfg.replications = args.replications
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "recipes":
        for name, (kind, overrides) in sorted(RECIPES.items()):
            print(f"{name:24s} {kind:20s} {json.dumps(overrides)}")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        _, runner = COMMANDS[args.command]
        out = args.out or getattr(cfg, "output", None) or f"results/{cfg.name}"
        result = runner(cfg, jobs=args.jobs, out_dir=out)
    except (ConfigurationError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.out_dir}")
    return 0
