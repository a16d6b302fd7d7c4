#!/usr/bin/env python3
"""
Console rendering and logging setup for the command-line interface.
"""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table

from src.core.trainer import EpochRecord
from src.core.types import METRIC_COLUMNS, EvalReport

HISTOGRAM_WIDTH = 40


def configure_logging(level: str = "INFO", console: Console | None = None):
    """Route all log records through a single rich handler."""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            RichHandler(
                console=console or Console(stderr=True),
                rich_tracebacks=True,
                show_path=False,
            )
        ],
        force=True,
    )


def display_error(console: Console, message: str) -> None:
    console.print(f"[red]Error: {message}[/red]")


def training_progress(console: Console) -> Progress:
    """Progress bar for training batches."""
    return Progress(
        TextColumn("[cyan]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    )


def _format(value: float | None, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def create_report_table(
    report: EvalReport, title: str, show_queries: bool = False
) -> Table:
    table = Table(
        title=title,
        show_header=True,
        header_style="bold magenta",
        box=box.MINIMAL,
    )
    table.add_column("Query", style="cyan")
    for column in METRIC_COLUMNS:
        table.add_column(column, style="green", justify="right")

    if show_queries:
        for row in report.rows:
            table.add_row(
                row.qid, *(_format(row.values[c]) for c in METRIC_COLUMNS)
            )
    mean = report.mean
    table.add_row(
        "[bold]mean[/bold]", *(_format(mean[c]) for c in METRIC_COLUMNS)
    )
    return table


def display_eval_report(
    console: Console,
    report: EvalReport,
    title: str = "📊 Evaluation",
    show_queries: bool = False,
) -> None:
    console.print(create_report_table(report, title, show_queries))


def create_history_table(history: Sequence[EpochRecord]) -> Table:
    table = Table(
        title="📈 Training History",
        show_header=True,
        header_style="bold magenta",
        box=box.MINIMAL,
    )
    for column in ("Epoch", "Phase", "L_R", "L_T", "Val NDCG@5", "Val TDCG"):
        table.add_column(column, style="green", justify="right")
    for record in history:
        table.add_row(
            str(record.epoch),
            record.phase,
            _format(record.loss_rerank),
            _format(record.loss_truncate),
            _format(record.val_ndcg5),
            _format(record.val_tdcg),
        )
    return table


def display_training_history(
    console: Console, history: Sequence[EpochRecord], best_epoch: int
) -> None:
    console.print(create_history_table(history))
    console.print(f"[green]Best epoch by validation NDCG@5: {best_epoch}[/]")


def display_cut_histogram(
    console: Console, histogram: Mapping[int, float]
) -> None:
    """Bars of the grade distribution of the first excluded document."""
    if not histogram:
        console.print("[dim]No query was cut before its last document.[/dim]")
        return
    console.print("[yellow bold]Grade of first excluded document[/]")
    for grade, share in sorted(histogram.items()):
        bar = "█" * round(share * HISTOGRAM_WIDTH)
        console.print(f"  grade {grade}: [cyan]{bar}[/cyan] {share:.1%}")


def display_summary(console: Console, lines: Mapping[str, str]) -> None:
    table = Table(show_header=False, box=box.MINIMAL)
    table.add_column("Item", style="cyan")
    table.add_column("Value", style="green")
    for key, value in lines.items():
        table.add_row(key, value)
    console.print(table)
