#!/usr/bin/env python3
"""
Command-line entry point: gen-data, train, eval and predict.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from typing import Sequence

from rich.console import Console

from src.__version__ import __description__, __version__
from src.core.decoder import decode
from src.core.metrics import (
    cutpoint_label_histogram,
    mean_margin_series,
    trend_slope,
)
from src.core.pipeline import run_pipeline
from src.core.trainer import EpochRecord, TrainResult, train
from src.core.types import (
    DECODE_MODES,
    ConfigError,
    Dataset,
    RerankCutError,
    TruncationPolicy,
    ValidationError,
)
from src.io.letor import (
    FeatureStats,
    attach_initial_scores,
    feature_scorer,
    generate_synthetic,
    split_dataset,
    standardize_features,
)
from src.io.operations import (
    RunConfig,
    load_checkpoint,
    load_dataset,
    load_run_config,
    save_checkpoint,
    save_dataset,
    write_history,
    write_report,
    write_traces,
)
from src.ui.interface import (
    configure_logging,
    display_cut_histogram,
    display_error,
    display_eval_report,
    display_summary,
    display_training_history,
    training_progress,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
MARGIN_STEPS = 5

logger = logging.getLogger("rerank_cut")


def _policy_arg(text: str) -> str:
    try:
        TruncationPolicy.parse(text)
    except ValidationError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description=__description__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py gen-data --config configs/default.yaml
  python main.py train --config configs/default.yaml --seed 7
  python main.py eval --config configs/default.yaml --policy fixed:5
  python main.py eval --config configs/default.yaml --mode fast
  python main.py predict --config configs/default.yaml --out traces.jsonl
        """,
    )
    parser.add_argument(
        "--version", action="version", version=f"rerank-cut {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    specs = {
        "gen-data": "Write synthetic train/valid/test LETOR files",
        "train": "Train the joint model and save the best checkpoint",
        "eval": "Evaluate a checkpoint on the test split",
        "predict": "Write reranked and truncated lists as JSON lines",
    }
    for name, help_text in specs.items():
        command = commands.add_parser(name, help=help_text)
        command.add_argument(
            "--config", required=True, help="Path to the YAML run config"
        )
        command.add_argument(
            "--seed", type=int, default=None, help="Override the seed"
        )
        command.add_argument(
            "--out",
            default=None,
            help=(
                "Output path (directory for gen-data, checkpoint for "
                "train, report for eval, trace file for predict)"
            ),
        )
        if name in ("eval", "predict"):
            command.add_argument(
                "--mode",
                choices=DECODE_MODES,
                default=None,
                help="Decode mode (default from config)",
            )
        if name == "eval":
            command.add_argument(
                "--policy",
                type=_policy_arg,
                default=None,
                help="Truncation policy: model, fixed:<x> or oracle",
            )
        if name == "predict":
            command.add_argument(
                "input",
                nargs="?",
                default=None,
                help="LETOR file to predict (default: the test split)",
            )
    return parser


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Fold command-line flags into the loaded configuration."""
    model, train_config, run = config.model, config.train, config.run
    if args.seed is not None:
        model = replace(model, seed=args.seed)
        train_config = replace(train_config, seed=args.seed)
    if getattr(args, "policy", None) is not None:
        run = replace(run, policy=args.policy)
    if getattr(args, "mode", None) is not None:
        run = replace(run, mode=args.mode)
    return RunConfig(model=model, train=train_config, run=run)


def _require_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise ConfigError(f"{what} '{path}' not found")


def prepare_dataset(
    path: str, config: RunConfig, stats: FeatureStats | None = None
) -> tuple[Dataset, FeatureStats | None]:
    """Load a split, attach first-stage scores and standardize features."""
    _require_file(path, "data file")
    dataset = load_dataset(path)
    if config.run.initial_score_feature is not None:
        dataset = attach_initial_scores(
            dataset, feature_scorer(config.run.initial_score_feature)
        )
    if config.model.standardize:
        dataset, stats = standardize_features(dataset, stats)
    return dataset, stats


def run_gen_data(config: RunConfig, out: str | None) -> None:
    console = Console()
    run = config.run
    dataset = generate_synthetic(
        run.num_queries,
        run.list_size,
        config.model.feature_dim,
        run.grade_max,
        run.noise_sigma,
        config.model.seed,
    )
    if out is not None:
        paths = [
            os.path.join(out, name)
            for name in ("train.txt", "valid.txt", "test.txt")
        ]
    else:
        paths = [run.train_path, run.valid_path, run.test_path]

    summary = {}
    for split, path in zip(split_dataset(dataset, run.split), paths):
        save_dataset(split, path)
        summary[path] = f"{len(split)} queries"
    display_summary(console, summary)


def run_train(config: RunConfig, out: str | None) -> TrainResult:
    console = Console()
    run = config.run
    _require_file(run.valid_path, "validation file")
    train_set, stats = prepare_dataset(run.train_path, config)
    valid_set, _ = prepare_dataset(run.valid_path, config, stats)
    checkpoint_path = out or run.checkpoint_path
    extras = {"feature_stats": stats}

    batch_size = config.train.resolved_batch_size(config.model)
    per_epoch = math.ceil(len(train_set) / batch_size)
    stem, _ = os.path.splitext(checkpoint_path)

    def save_periodic(record: EpochRecord, result: TrainResult) -> None:
        every = config.train.checkpoint_every
        if every and record.epoch % every == 0:
            save_checkpoint(
                result.model,
                f"{stem}.epoch{record.epoch}.pt",
                epoch=record.epoch,
                optimizer=result.optimizer,
                extras=extras,
            )

    with training_progress(console) as progress:
        task = progress.add_task(
            "Training", total=per_epoch * config.train.epochs
        )
        result = train(
            train_set,
            config.model,
            config.train,
            valid=valid_set,
            on_batch=lambda epoch, batch: progress.advance(task),
            on_epoch=save_periodic,
        )

    save_checkpoint(
        result.best_model,
        checkpoint_path,
        epoch=result.best_epoch,
        extras=extras,
    )
    write_history(result.history, run.history_path)
    display_training_history(console, result.history, result.best_epoch)
    console.print(f"[green]Saved checkpoint to {checkpoint_path}[/green]")
    return result


def run_eval(config: RunConfig, out: str | None) -> None:
    console = Console()
    run = config.run
    _require_file(run.checkpoint_path, "checkpoint")
    checkpoint = load_checkpoint(run.checkpoint_path)
    model = checkpoint.model
    run_config = replace(config, model=model.config)
    test_set, _ = prepare_dataset(
        run.test_path, run_config, checkpoint.extras.get("feature_stats")
    )

    policy = TruncationPolicy.parse(run.policy)
    result = run_pipeline(test_set, model, policy, run.mode)
    report_path = out or run.report_path
    write_report(result.report, report_path)
    display_eval_report(
        console, result.report, title=f"📊 {policy} / {run.mode}"
    )

    if policy.kind == "model" and run.mode == "full":
        display_cut_histogram(
            console, cutpoint_label_histogram(result.traces, result.lists)
        )
    if run.mode in ("full", "rerank_only"):
        series = mean_margin_series(
            result.traces,
            result.lists,
            MARGIN_STEPS,
            model.config.relevance_threshold,
        )
        try:
            slope = trend_slope(series)
            console.print(f"Min-margin trend over steps 1-5: {slope:+.4f}")
        except ValidationError:
            logger.info("margin trend undefined on this test set")
    console.print(f"[green]Wrote report to {report_path}[/green]")


def run_predict(
    config: RunConfig, source: str | None, out: str | None
) -> None:
    console = Console()
    run = config.run
    _require_file(run.checkpoint_path, "checkpoint")
    checkpoint = load_checkpoint(run.checkpoint_path)
    model = checkpoint.model
    run_config = replace(config, model=model.config)
    dataset, _ = prepare_dataset(
        source or run.test_path,
        run_config,
        checkpoint.extras.get("feature_stats"),
    )
    traces = [decode(group, model, run.mode) for group in dataset.groups]
    trace_path = out or run.trace_path
    write_traces(traces, trace_path)
    console.print(
        f"[green]Wrote {len(traces)} traces to {trace_path}[/green]"
    )


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    console = Console(stderr=True)
    try:
        config = apply_overrides(load_run_config(args.config), args)
        configure_logging(config.run.log_level)
        if args.command == "gen-data":
            run_gen_data(config, args.out)
        elif args.command == "train":
            run_train(config, args.out)
        elif args.command == "eval":
            run_eval(config, args.out)
        else:
            run_predict(config, args.input, args.out)
    except ConfigError as e:
        display_error(console, str(e))
        return EXIT_USAGE
    except (RerankCutError, OSError) as e:
        display_error(console, str(e))
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
