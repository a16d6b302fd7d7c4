#!/usr/bin/env python3
"""
Training schedule: one reranking-only epoch, then batches alternating
between the reranking and truncation objectives with the other task's
module frozen. Single-task runs learn only reranking, or only truncation
of the input order.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from src.core.decoder import generate
from src.core.losses import (
    RolloutRecord,
    rerank_loss,
    soft_cut_labels,
    truncation_loss,
)
from src.core.model import (
    RERANK_PHASE,
    TRUNCATE_PHASE,
    RerankTruncateModel,
    build_model,
    phase_mask,
)
from src.core.pipeline import run_pipeline
from src.core.types import (
    Dataset,
    ModelConfig,
    QueryList,
    TrainConfig,
    TrainingDivergedError,
    TruncationPolicy,
    ValidationError,
    check_gamma_coverage,
    validate_query_list,
)

logger = logging.getLogger(__name__)

BatchCallback = Callable[[int, int], None]


@dataclass
class Rollout:
    """A training rollout: the record plus per-step cut distributions."""

    record: RolloutRecord
    cut_probs: list[torch.Tensor]


@dataclass(frozen=True)
class EpochRecord:
    """One row of the training history."""

    epoch: int
    phase: str
    loss_rerank: float | None
    loss_truncate: float | None
    val_ndcg5: float
    val_tdcg: float


@dataclass
class TrainResult:
    model: RerankTruncateModel
    best_model: RerankTruncateModel
    best_epoch: int
    history: list[EpochRecord] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None


def rollout_batch(
    lists: Sequence[QueryList],
    model: RerankTruncateModel,
    with_truncation: bool = True,
    mode: str = "rerank_only",
) -> list[Rollout]:
    """Full-length greedy rollouts with gradients on scores and probs.

    The argmax selection itself is not differentiated; chosen positions
    enter the losses through their scores. ``mode`` is ``rerank_only``
    or ``truncate_only`` (input order, cut decisions at every step).
    """
    rollouts = []
    for query_list in lists:
        generation = generate(
            model,
            query_list,
            mode=mode,
            with_truncation=with_truncation,
            exhaustive=True,
        )
        record = RolloutRecord(
            chosen=generation.chosen,
            labels=generation.query_list.labels,
            score_matrices=generation.scores,
            windows=generation.windows,
        )
        rollouts.append(Rollout(record=record, cut_probs=generation.cut_probs))
    return rollouts


def batch_phase(epoch: int, batch_index: int, tasks: str = "joint") -> str:
    """Epoch 1 reranks only; later epochs alternate by batch parity.

    Single-task runs use their one phase in every batch.
    """
    if tasks == "truncate":
        return TRUNCATE_PHASE
    if tasks == "rerank" or epoch == 1 or batch_index % 2 == 0:
        return RERANK_PHASE
    return TRUNCATE_PHASE


def batch_loss(
    rollouts: Sequence[Rollout],
    phase: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> torch.Tensor:
    """Mean objective of the phase over the batch."""
    if phase == RERANK_PHASE:
        losses = [
            rerank_loss(
                rollout.record,
                model_config.eta,
                model_config.log_base,
                train_config.use_attention_loss,
                train_config.use_sbs_loss,
            )
            for rollout in rollouts
        ]
    else:
        losses = [
            truncation_loss(
                rollout.cut_probs,
                soft_cut_labels(
                    rollout.record,
                    model_config.gamma_map,
                    model_config.log_base,
                ),
            )
            for rollout in rollouts
        ]
    return torch.stack(losses).mean()


def epoch_batches(
    num_groups: int, batch_size: int, seed: int, epoch: int
) -> list[list[int]]:
    """Shuffled batch index lists; depends only on (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(num_groups)
    return [
        order[start : start + batch_size].tolist()
        for start in range(0, num_groups, batch_size)
    ]


def validation_scores(
    model: RerankTruncateModel, dataset: Dataset, tasks: str = "joint"
) -> tuple[float, float]:
    """(rerank-only NDCG@5, TDCG) means on a dataset.

    TDCG is measured in full mode, or truncate_only for truncation runs.
    """
    policy = TruncationPolicy("model")
    rerank = run_pipeline(dataset, model, policy, mode="rerank_only")
    cut_mode = "truncate_only" if tasks == "truncate" else "full"
    cut = run_pipeline(dataset, model, policy, cut_mode)
    return rerank.report.mean["ndcg@5"], cut.report.mean["tdcg"]


def epoch_label(epoch: int, tasks: str) -> str:
    if tasks == "joint":
        return RERANK_PHASE if epoch == 1 else "joint"
    return RERANK_PHASE if tasks == "rerank" else TRUNCATE_PHASE


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    valid: Dataset | None = None,
    model: RerankTruncateModel | None = None,
    optimizer_state: dict | None = None,
    start_epoch: int = 0,
    on_batch: BatchCallback | None = None,
    on_epoch: Callable[[EpochRecord, TrainResult], None] | None = None,
) -> TrainResult:
    """Train the model on the tasks named by ``train_config.tasks``.

    The best model is chosen by validation NDCG@5, or by validation TDCG
    when only truncation is learned. ``model``, ``optimizer_state`` and
    ``start_epoch`` resume a run from a checkpoint taken after epoch
    ``start_epoch``. ``on_epoch`` is called after each epoch (used for
    periodic checkpoints).
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    lists = [validate_query_list(g, model_config) for g in dataset.groups]
    short = [ql.qid for ql in lists if len(ql) < 2]
    if short:
        raise ValidationError(
            f"training lists need at least 2 documents: {short[:5]}"
        )
    check_gamma_coverage(dataset, model_config.gamma_map)
    if valid is None:
        logger.warning("no validation split; validating on training data")
        valid = dataset
    check_gamma_coverage(valid, model_config.gamma_map)
    tasks = train_config.tasks
    rollout_mode = "truncate_only" if tasks == "truncate" else "rerank_only"

    seed = train_config.resolved_seed(model_config)
    batch_size = train_config.resolved_batch_size(model_config)
    if model is None:
        model = build_model(model_config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.resolved_lr(model_config)
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    result = TrainResult(
        model=model,
        best_model=copy.deepcopy(model),
        best_epoch=start_epoch,
        optimizer=optimizer,
    )
    best_score = -math.inf
    parameters = dict(model.named_parameters())

    for epoch in range(start_epoch + 1, train_config.epochs + 1):
        rerank_losses: list[float] = []
        truncate_losses: list[float] = []
        batches = epoch_batches(len(lists), batch_size, seed, epoch)

        for batch_index, indices in enumerate(batches):
            phase = batch_phase(epoch, batch_index, tasks)
            mask = phase_mask(phase)
            optimizer.zero_grad(set_to_none=True)

            rollouts = rollout_batch(
                [lists[i] for i in indices],
                model,
                with_truncation=phase == TRUNCATE_PHASE,
                mode=rollout_mode,
            )
            loss = batch_loss(rollouts, phase, model_config, train_config)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{epoch}:{batch_index}", value)

            loss.backward()
            for name, parameter in parameters.items():
                if mask.is_frozen(name):
                    parameter.grad = None
            optimizer.step()

            if phase == RERANK_PHASE:
                rerank_losses.append(value)
            else:
                truncate_losses.append(value)
            if on_batch is not None:
                on_batch(epoch, batch_index)

        with torch.no_grad():
            val_ndcg5, val_tdcg = validation_scores(model, valid, tasks)
        record = EpochRecord(
            epoch=epoch,
            phase=epoch_label(epoch, tasks),
            loss_rerank=_mean(rerank_losses),
            loss_truncate=_mean(truncate_losses),
            val_ndcg5=val_ndcg5,
            val_tdcg=val_tdcg,
        )
        result.history.append(record)
        logger.info(
            "epoch %d: L_R=%s L_T=%s val ndcg@5=%.4f val tdcg=%.4f",
            epoch,
            record.loss_rerank,
            record.loss_truncate,
            val_ndcg5,
            val_tdcg,
        )

        score = val_tdcg if tasks == "truncate" else val_ndcg5
        if score > best_score:
            best_score = score
            result.best_model = copy.deepcopy(model)
            result.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(record, result)

    return result
