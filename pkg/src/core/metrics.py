#!/usr/bin/env python3
"""
Pure functions for ranking and truncation evaluation.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Sequence

import numpy as np

from src.core.losses import tdcg
from src.core.types import (
    DecodeTrace,
    EvalReport,
    EvalRow,
    GammaMap,
    QueryList,
    ValidationError,
)

logger = logging.getLogger(__name__)


def _discount(position: int, log_base: float) -> float:
    return 1.0 / math.log(1 + position, log_base)


def dcg_at_k(
    labels_in_rank_order: Sequence[int], k: int, log_base: float = 2.0
) -> float:
    return math.fsum(
        (2.0**label - 1.0) * _discount(position, log_base)
        for position, label in enumerate(labels_in_rank_order[:k], start=1)
    )


def ndcg_at_k(
    labels_in_rank_order: Sequence[int],
    k: int,
    ideal_labels: Sequence[int] | None = None,
    log_base: float = 2.0,
) -> float:
    """DCG@k / IDCG@k, 0.0 when no document is relevant.

    ``ideal_labels`` defaults to the ranked labels themselves; pass all of
    the query's labels when the ranking is a cut prefix.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    pool = labels_in_rank_order if ideal_labels is None else ideal_labels
    ideal = dcg_at_k(sorted(pool, reverse=True), k, log_base)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(labels_in_rank_order, k, log_base) / ideal


def err_at_k(
    labels_in_rank_order: Sequence[int], k: int, grade_max: int
) -> float:
    """Expected reciprocal rank with stop probability (2^g - 1) / 2^gmax."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    scale = 2.0**grade_max
    not_stopped = 1.0
    total = 0.0
    for rank, label in enumerate(labels_in_rank_order[:k], start=1):
        stop = (2.0**label - 1.0) / scale
        total += not_stopped * stop / rank
        not_stopped *= 1.0 - stop
    return total


def average_precision(
    labels_in_rank_order: Sequence[int],
    relevance_threshold: int = 1,
    total_relevant: int | None = None,
) -> float:
    """Mean of precision at each relevant position; 0.0 without relevant."""
    hits = 0
    precisions = []
    for position, label in enumerate(labels_in_rank_order, start=1):
        if label >= relevance_threshold:
            hits += 1
            precisions.append(hits / position)
    denominator = hits if total_relevant is None else total_relevant
    if denominator == 0:
        return 0.0
    return math.fsum(precisions) / denominator


def recall_at_k(
    labels_in_rank_order: Sequence[int],
    k: int,
    total_relevant: int,
    relevance_threshold: int = 1,
) -> float:
    if total_relevant == 0:
        return 0.0
    found = sum(
        1
        for label in labels_in_rank_order[:k]
        if label >= relevance_threshold
    )
    return found / total_relevant


def _check_indices(trace: DecodeTrace, query_list: QueryList) -> None:
    n = len(query_list)
    for index in trace.chosen:
        if not 0 <= index < n:
            raise ValidationError(
                f"query {trace.qid}: trace index {index} outside list of "
                f"{n} documents"
            )


def evaluate_trace(
    trace: DecodeTrace,
    query_list: QueryList,
    gamma: GammaMap,
    grade_max: int,
    relevance_threshold: int = 1,
    log_base: float = 2.0,
) -> EvalRow:
    """Ranking metrics on the generated order, TDCG on the cut prefix."""
    _check_indices(trace, query_list)
    labels = query_list.labels
    ranked = [labels[i] for i in trace.chosen]
    relevant = sum(1 for label in labels if label >= relevance_threshold)

    values = {
        "ndcg@1": ndcg_at_k(ranked, 1, labels, log_base),
        "ndcg@5": ndcg_at_k(ranked, 5, labels, log_base),
        "ndcg@10": ndcg_at_k(ranked, 10, labels, log_base),
        "err@5": err_at_k(ranked, 5, grade_max),
        "err@10": err_at_k(ranked, 10, grade_max),
        "map": average_precision(ranked, relevance_threshold, relevant),
        "recall@5": recall_at_k(ranked, 5, relevant, relevance_threshold),
        "recall@10": recall_at_k(ranked, 10, relevant, relevance_threshold),
        "tdcg": tdcg(ranked, gamma, trace.cut_step, log_base),
        "output_length": float(trace.cut_step),
    }
    return EvalRow(qid=trace.qid, values=values)


def build_report(rows: Sequence[EvalRow]) -> EvalReport:
    return EvalReport(rows=tuple(rows))


def min_margin_by_step(
    trace: DecodeTrace,
    query_list: QueryList,
    relevance_threshold: int = 1,
) -> list[tuple[int, float]]:
    """(step, lowest positive score - highest negative score) per step.

    Steps where the remaining candidates lack either class are omitted.
    """
    _check_indices(trace, query_list)
    labels = query_list.labels
    margins = []
    for step, scores in enumerate(trace.score_matrices, start=1):
        selected = set(trace.chosen[: step - 1])
        positives = []
        negatives = []
        for index, score in enumerate(scores):
            if index in selected:
                continue
            if labels[index] >= relevance_threshold:
                positives.append(score)
            else:
                negatives.append(score)
        if positives and negatives:
            margins.append((step, min(positives) - max(negatives)))
    return margins


def mean_margin_series(
    traces: Sequence[DecodeTrace],
    lists: Sequence[QueryList],
    steps: int,
    relevance_threshold: int = 1,
) -> np.ndarray:
    """Mean margin per step 1..steps across queries (NaN where undefined)."""
    sums = np.zeros(steps)
    counts = np.zeros(steps)
    for trace, query_list in zip(traces, lists):
        for step, margin in min_margin_by_step(
            trace, query_list, relevance_threshold
        ):
            if step <= steps:
                sums[step - 1] += margin
                counts[step - 1] += 1
    series = np.full(steps, np.nan)
    defined = counts > 0
    series[defined] = sums[defined] / counts[defined]
    return series


def trend_slope(series: np.ndarray) -> float:
    """Least-squares slope of a series against 1..len, NaNs skipped."""
    steps = np.arange(1, len(series) + 1, dtype=float)
    defined = np.isfinite(series)
    if defined.sum() < 2:
        raise ValidationError("a trend needs at least two defined steps")
    slope, _ = np.polyfit(steps[defined], series[defined], deg=1)
    return float(slope)


def cutpoint_label_histogram(
    traces: Sequence[DecodeTrace], lists: Sequence[QueryList]
) -> dict[int, float]:
    """Distribution of the grade of the first document excluded by the cut.

    Needs traces that continue past the cut (exhaustive decoding); queries
    cut at N or without a generated successor are skipped.
    """
    counts: Counter[int] = Counter()
    skipped = 0
    for trace, query_list in zip(traces, lists):
        _check_indices(trace, query_list)
        if trace.cut_step >= len(trace.chosen):
            skipped += 1
            continue
        counts[query_list.labels[trace.chosen[trace.cut_step]]] += 1
    if skipped:
        logger.debug("histogram skipped %d uncut queries", skipped)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {grade: counts[grade] / total for grade in sorted(counts)}
