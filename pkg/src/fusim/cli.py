"""Command-line entry: experiment stages, full runs, and route comparisons.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import experiment
from .config import ConfigError, ExperimentConfig, ROUTES, load_config

logger = logging.getLogger("fusim")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "route", None):
        cfg = dataclasses.replace(
            cfg, unlearn=dataclasses.replace(cfg.unlearn, route=args.route))
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _add_common(p: argparse.ArgumentParser, with_route: bool = True) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    if with_route:
        p.add_argument("--route", choices=ROUTES, default=None,
                       help="unlearning route override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusim",
        description="Deterministic federated learning and unlearning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("partition", "build the client partition plan"),
            ("train", "federated training to convergence"),
            ("unlearn", "apply the configured unlearning route"),
            ("evaluate", "per-client per-class accuracy reports and metrics"),
            ("run", "all stages in sequence"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    pc = sub.add_parser("compare", help="run several routes and merge the tables")
    _add_common(pc, with_route=False)
    pc.add_argument("--routes", required=True,
                    help="comma-separated routes, e.g. delete,relabel,zeroing,fedcccu")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ConfigError, OSError) as exc:
        logger.error("config: %s", exc)
        return EXIT_CONFIG
    out = cfg.out_dir
    try:
        if args.command == "partition":
            task = experiment.ensure_partition(cfg, out)
            logger.info("partition: %d clients over %d domains -> %s",
                        task.plan.client_count, len(task.train_domains), out)
        elif args.command == "train":
            _, _, summary = experiment.ensure_train(cfg, out)
            logger.info("train: convergence_round=%s final_val_error=%s",
                        summary["convergence_round"], summary["final_val_error"])
        elif args.command == "unlearn":
            _, _, _, summary = experiment.ensure_unlearn(cfg, out)
            logger.info("unlearn: route=%s rounds=%s", summary["route"],
                        summary["unlearn_rounds_run"])
        elif args.command in ("evaluate", "run"):
            _, before, after, metrics = experiment.ensure_evaluate(cfg, out)
            logger.info("global accuracy %.4f -> %.4f", before.global_accuracy,
                        after.global_accuracy)
            logger.info("forget_efficacy=%.2f collateral_retained=%.2f",
                        metrics.forget_efficacy, metrics.collateral_retained)
        elif args.command == "compare":
            routes = [r.strip() for r in args.routes.split(",") if r.strip()]
            bad = [r for r in routes if r not in ROUTES]
            if bad:
                logger.error("config: unknown routes %s", bad)
                return EXIT_CONFIG
            cfgs = [dataclasses.replace(
                cfg, unlearn=dataclasses.replace(cfg.unlearn, route=r))
                for r in routes]
            experiment.compare_routes(cfgs, out)
            logger.info("compare: wrote %s/compare.csv", out)
        return EXIT_OK
    except ConfigError as exc:
        logger.error("config: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        logger.error("runtime: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
