"""Command-line entry point.

Subcommands: ``run`` (one experiment), ``plot`` (figures from a metrics
file) and ``suite`` (the ablation grid). Exit codes: 0 success, 1 config
error, 2 numerical failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .client import NumericalError
from .harness import emit_plots, parse_config, run_ablation_suite, run_experiment
from .harness_errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfedsim",
        description="Desk-scale federated multi-modal learning simulator",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", help="YAML config file")
    run.add_argument("--beta", type=float, help="missing-modality ratio override")
    run.add_argument("--partition", choices=["iid", "noniid"], help="partition override")
    run.add_argument(
        "--ablation",
        choices=["none", "wo_mcm", "wo_ram", "wo_completion", "wo_cka"],
        help="ablation override",
    )
    run.add_argument("--rounds", type=int, help="communication rounds override")
    run.add_argument("--seed", type=int, help="master seed override")
    run.add_argument("--out", help="output directory override")

    plot = sub.add_parser("plot", help="emit figures from a metrics file")
    plot.add_argument("--metrics", required=True, help="metrics.jsonl path")
    plot.add_argument("--out", required=True, help="figure output directory")

    suite = sub.add_parser("suite", help="run the ablation grid")
    suite.add_argument("--config", help="YAML base config file")
    suite.add_argument("--seeds", required=True, help="comma-separated master seeds")
    suite.add_argument("--out", required=True, help="suite output directory")
    return parser


def _cmd_run(args) -> int:
    overrides = {
        "beta": args.beta,
        "partition": args.partition,
        "ablation": args.ablation,
        "rounds": args.rounds,
        "master_seed": args.seed,
        "out_dir": args.out,
    }
    cfg = parse_config(args.config, overrides)
    result = run_experiment(cfg)
    print(f"metrics: {result.metrics_path}")
    print(f"params:  {result.params_path}")
    for mode, acc in result.final_accuracy.items():
        print(f"final {mode} accuracy: {acc:.4f}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    for path in emit_plots(args.metrics, args.out):
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_suite(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value: {exc}") from exc
    cfg = parse_config(args.config)
    summary = run_ablation_suite(cfg, seeds, args.out)
    print(f"summary: {summary}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "plot":
            return _cmd_plot(args)
        if args.command == "suite":
            return _cmd_suite(args)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
