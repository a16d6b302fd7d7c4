#!/usr/bin/env python3
"""
End-to-end inference with a truncation policy: the model's own cut,
a fixed cut-off, or the TDCG oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from src.core.decoder import decode
from src.core.losses import tdcg
from src.core.metrics import build_report, evaluate_trace
from src.core.model import RerankTruncateModel
from src.core.types import (
    Dataset,
    DecodeTrace,
    EvalReport,
    GammaMap,
    QueryList,
    TruncationPolicy,
    ValidationError,
    check_gamma_coverage,
    validate_query_list,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineResult:
    """Traces, validated lists and the evaluation report of one run."""

    traces: tuple[DecodeTrace, ...]
    lists: tuple[QueryList, ...]
    report: EvalReport


def oracle_cut(
    labels_in_rank_order: Sequence[int],
    gamma: GammaMap,
    log_base: float = 2.0,
) -> int:
    """Smallest x maximizing TDCG@x."""
    if not labels_in_rank_order:
        raise ValidationError("oracle cut needs a non-empty list")
    best_x = 1
    best = tdcg(labels_in_rank_order, gamma, 1, log_base)
    for x in range(2, len(labels_in_rank_order) + 1):
        value = tdcg(labels_in_rank_order, gamma, x, log_base)
        if value > best:
            best_x, best = x, value
    return best_x


def apply_policy(
    trace: DecodeTrace,
    query_list: QueryList,
    policy: TruncationPolicy,
    gamma: GammaMap,
    log_base: float = 2.0,
) -> DecodeTrace:
    """Re-cut a complete ordering with a fixed or oracle policy."""
    if policy.kind == "model":
        return trace
    if policy.kind == "fixed":
        assert policy.x is not None
        return trace.with_cut(min(policy.x, len(trace.chosen)))
    ranked = [query_list.labels[i] for i in trace.chosen]
    return trace.with_cut(oracle_cut(ranked, gamma, log_base))


def decode_with_policy(
    query_list: QueryList,
    model: RerankTruncateModel,
    policy: TruncationPolicy,
    mode: str = "full",
) -> DecodeTrace:
    config = model.config
    if policy.kind == "model":
        return decode(query_list, model, mode=mode, exhaustive=True)
    base_mode = "rerank_only" if mode == "full" else mode
    trace = decode(query_list, model, mode=base_mode, exhaustive=True)
    return apply_policy(
        trace, query_list, policy, config.gamma_map, config.log_base
    )


def run_pipeline(
    dataset: Dataset,
    model: RerankTruncateModel,
    policy: TruncationPolicy,
    mode: str = "full",
) -> PipelineResult:
    """Decode every query under ``policy`` and evaluate the traces.

    Fixed and oracle policies cut the rerank-only order (or the order of
    the requested non-full mode).
    """
    config = model.config
    check_gamma_coverage(dataset, config.gamma_map)
    grade_max = (
        config.grade_max if config.grade_max is not None else dataset.grade_max
    )
    lists = tuple(
        validate_query_list(group, config) for group in dataset.groups
    )
    traces = tuple(
        decode_with_policy(query_list, model, policy, mode)
        for query_list in lists
    )
    rows = [
        evaluate_trace(
            trace,
            query_list,
            config.gamma_map,
            grade_max,
            config.relevance_threshold,
            config.log_base,
        )
        for trace, query_list in zip(traces, lists)
    ]
    report = build_report(rows)
    logger.info(
        "evaluated %d queries (policy=%s, mode=%s): mean tdcg %.4f",
        len(rows),
        policy,
        mode,
        report.mean["tdcg"],
    )
    return PipelineResult(traces=traces, lists=lists, report=report)
