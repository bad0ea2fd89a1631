from __future__ import annotations

import argparse
from pathlib import Path
import sys
from typing import Sequence

from .config import load_config
from .errors import ConfigError
from .logging_utils import setup_logging
from .pipeline import (
    run_attack_gen,
    run_baseline,
    run_cfg_build,
    run_cfg_refine,
    run_chains_split,
    run_dataset_build,
    run_detect,
    run_eval,
    run_report,
    run_simulate,
    run_synth,
    run_table_build,
    run_train,
)

USAGE_EXIT_CODE = 1


class _Parser(argparse.ArgumentParser):
    """Usage errors share exit code 1 with configuration errors."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT_CODE, f"{self.prog}: error: {message}\n")


def _integer(text: str) -> int:
    return int(text, 0)


def _ratios(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_integer, help="Master seed; stage seeds default to it")
    common.add_argument("--config", type=Path, help="Key-value config file (CFIGUARD_* keys)")
    common.add_argument("--out", type=Path, help="Output file (or directory for attack gen/detect)")
    common.add_argument("--fail-fast", action="store_true", help="Stop replay at the first alert")
    common.add_argument("--gmax", type=_integer, help="Bytes kept per gadget in the encoding")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(description="Learned control-flow integrity pipeline")
    subparsers = parser.add_subparsers(dest="mode", required=True, parser_class=_Parser)

    synth_parser = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic program listing")
    synth_parser.add_argument("--min-gadgets", type=_integer)
    synth_parser.add_argument("--truth", type=Path, help="Where to write the indirect-target truth map")
    synth_parser.add_argument("--base", type=_integer)

    cfg_parser = subparsers.add_parser("cfg", help="Build or refine the gadget CFG")
    cfg_commands = cfg_parser.add_subparsers(dest="action", required=True, parser_class=_Parser)
    cfg_build = cfg_commands.add_parser("build", parents=[common], help="Static CFG from an instruction listing")
    cfg_build.add_argument("listing", type=Path)
    cfg_build.add_argument("--base", type=_integer)
    cfg_refine = cfg_commands.add_parser("refine", parents=[common], help="Add trace-witnessed indirect edges")
    cfg_refine.add_argument("cfg", type=Path)
    cfg_refine.add_argument("traces", type=Path, nargs="+")
    cfg_refine.add_argument("--table", type=Path, required=True)

    table_parser = subparsers.add_parser("table", help="Offset table for detection")
    table_commands = table_parser.add_subparsers(dest="action", required=True, parser_class=_Parser)
    table_build = table_commands.add_parser("build", parents=[common])
    table_build.add_argument("cfg", type=Path)

    chains_parser = subparsers.add_parser("chains", help="Benign/malicious gadget chains")
    chains_commands = chains_parser.add_subparsers(dest="action", required=True, parser_class=_Parser)
    chains_split = chains_commands.add_parser("split", parents=[common])
    chains_split.add_argument("cfg", type=Path)
    chains_split.add_argument("--malicious-count", type=_integer)

    dataset_parser = subparsers.add_parser("dataset", help="Encoded train/validation/test partitions")
    dataset_commands = dataset_parser.add_subparsers(dest="action", required=True, parser_class=_Parser)
    dataset_build = dataset_commands.add_parser("build", parents=[common])
    dataset_build.add_argument("chains", type=Path)
    dataset_build.add_argument("--table", type=Path, required=True)
    dataset_build.add_argument("--ratios", type=_ratios, help="train,validation,test")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train the chain classifier")
    train_parser.add_argument("dataset", type=Path)
    train_parser.add_argument("--epochs", type=_integer)

    baseline_parser = subparsers.add_parser("baseline", parents=[common], help="Train the logistic-regression baseline")
    baseline_parser.add_argument("dataset", type=Path)
    baseline_parser.add_argument("--epochs", type=_integer)

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Accuracy, FPR and FNR on a partition")
    eval_parser.add_argument("dataset", type=Path)
    eval_parser.add_argument("--model", type=Path, required=True)
    eval_parser.add_argument("--baseline", type=Path)
    eval_parser.add_argument("--partition", choices=("train", "validation", "test"), default="test")

    simulate_parser = subparsers.add_parser("simulate", parents=[common], help="Emit a benign simulated trace")
    simulate_parser.add_argument("cfg", type=Path)
    simulate_parser.add_argument("--truth", type=Path)
    simulate_parser.add_argument("--steps", type=_integer)
    simulate_parser.add_argument("--walk", type=Path)

    attack_parser = subparsers.add_parser("attack", help="Payload-injected traces")
    attack_commands = attack_parser.add_subparsers(dest="action", required=True, parser_class=_Parser)
    attack_gen = attack_commands.add_parser("gen", parents=[common])
    attack_gen.add_argument("cfg", type=Path)
    attack_gen.add_argument("trace", type=Path)
    attack_gen.add_argument("--count", type=_integer)

    detect_parser = subparsers.add_parser("detect", parents=[common], help="Replay traces through the detector")
    detect_parser.add_argument("traces", type=Path, nargs="+")
    detect_parser.add_argument("--cfg", type=Path, required=True)
    detect_parser.add_argument("--table", type=Path, required=True)
    detect_parser.add_argument("--model", type=Path)
    detect_parser.add_argument("--oracle", action="store_true", help="Classify by CFG edge membership")
    detect_parser.add_argument("--jobs", type=_integer, default=1)

    report_parser = subparsers.add_parser("report", parents=[common], help="Render stored alert reports")
    report_parser.add_argument("reports", type=Path, nargs="+")
    report_parser.add_argument("--manifest", type=Path)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, object]:
    return {
        "seed": args.seed,
        "g_max": args.gmax,
        "fail_fast": True if args.fail_fast else None,
        "base": getattr(args, "base", None),
        "ratios": getattr(args, "ratios", None),
        "epochs": getattr(args, "epochs", None),
    }


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(config_path=args.config, overrides=_overrides(args))
    except ConfigError as exc:
        print(f"{parser.prog}: {exc}", file=sys.stderr)
        return exc.exit_code
    logger = setup_logging(config)
    action = getattr(args, "action", None)

    if args.mode == "synth":
        return run_synth(config, logger, args.out, args.truth, args.min_gadgets)
    if args.mode == "cfg" and action == "build":
        return run_cfg_build(config, logger, args.listing, args.out, args.base)
    if args.mode == "cfg" and action == "refine":
        return run_cfg_refine(config, logger, args.cfg, args.traces, args.table, args.out)
    if args.mode == "table":
        return run_table_build(config, logger, args.cfg, args.out, args.gmax)
    if args.mode == "chains":
        return run_chains_split(config, logger, args.cfg, args.out, args.malicious_count)
    if args.mode == "dataset":
        return run_dataset_build(config, logger, args.chains, args.table, args.out)
    if args.mode == "train":
        return run_train(config, logger, args.dataset, args.out)
    if args.mode == "baseline":
        return run_baseline(config, logger, args.dataset, args.out)
    if args.mode == "eval":
        return run_eval(config, logger, args.dataset, args.model, args.baseline, args.partition, args.out)
    if args.mode == "simulate":
        return run_simulate(config, logger, args.cfg, args.truth, args.out, args.walk, args.steps)
    if args.mode == "attack":
        return run_attack_gen(config, logger, args.cfg, args.trace, args.out, args.count)
    if args.mode == "detect":
        return run_detect(
            config,
            logger,
            args.traces,
            args.cfg,
            args.table,
            model_path=args.model,
            oracle=args.oracle,
            out_dir=args.out,
            jobs=args.jobs,
        )
    if args.mode == "report":
        return run_report(config, logger, args.reports, args.manifest)

    parser.error(f"Unsupported mode: {args.mode}")
    return USAGE_EXIT_CODE


if __name__ == "__main__":
    raise SystemExit(main())
