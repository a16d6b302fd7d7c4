#!/usr/bin/env python3
"""
Training objectives.

Reranking: step-adaptive attention loss and step-by-step lambda loss,
mixed by eta. Truncation: cross entropy against soft cut labels derived
from TDCG rewards of the local list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from src.core.types import GammaMap, ValidationError

SELECTED_LOGIT = -1e4
PROB_FLOOR = 1e-12


@dataclass
class RolloutRecord:
    """A generated sequence with the score vector of every step.

    ``labels`` are the grades of all candidates, indexed like the scores;
    ``windows[t]`` holds the backward-window indices seen at step t + 1.
    """

    chosen: list[int]
    labels: list[int]
    score_matrices: list[Tensor]
    windows: list[list[int]]

    @property
    def sequence_labels(self) -> list[int]:
        return [self.labels[i] for i in self.chosen]


@dataclass(frozen=True)
class SoftCutLabels:
    """Per-step (y_cut, y_nocut) pairs."""

    pairs: tuple[tuple[float, float], ...]


def _discount(position: int, log_base: float) -> float:
    return 1.0 / math.log(1 + position, log_base)


def _graph_zero(rollout: RolloutRecord) -> Tensor:
    # zero that still depends on the scores, so backward() is always valid
    return rollout.score_matrices[0].sum() * 0.0


def _selected_mask(chosen: Sequence[int], n: int) -> Tensor:
    mask = torch.zeros(n, dtype=torch.bool)
    if chosen:
        mask[list(chosen)] = True
    return mask


def attention_targets(labels: Tensor, selected_mask: Tensor) -> Tensor:
    """softmax(phi): selected documents get -1e4, the rest their label."""
    phi = torch.where(
        selected_mask, torch.full_like(labels, SELECTED_LOGIT), labels
    )
    return torch.softmax(phi, dim=-1)


def step_adaptive_attention_loss(
    rollout: RolloutRecord, log_base: float = 2.0
) -> Tensor:
    """Sum over steps of 1/log(1+t) * CE(target attention, predicted)."""
    if not rollout.score_matrices:
        raise ValidationError("rollout has no score matrices")
    dtype = rollout.score_matrices[0].dtype
    labels = torch.tensor(rollout.labels, dtype=dtype)
    n = labels.shape[0]

    terms = []
    for step, scores in enumerate(rollout.score_matrices, start=1):
        selected = _selected_mask(rollout.chosen[: step - 1], n)
        targets = attention_targets(labels, selected)
        predicted = torch.where(
            selected, torch.full_like(scores, SELECTED_LOGIT), scores
        )
        cross_entropy = -(targets * F.log_softmax(predicted, dim=-1)).sum()
        terms.append(cross_entropy * _discount(step, log_base))
    return torch.stack(terms).sum()


def swap_ndcg_delta(
    sequence_labels: Sequence[int],
    first: int,
    second: int,
    log_base: float = 2.0,
) -> float:
    """|NDCG change| from swapping two 0-based positions of a sequence."""
    ideal = _dcg(sorted(sequence_labels, reverse=True), log_base)
    if ideal == 0.0:
        return 0.0
    gain_gap = (2.0 ** sequence_labels[second]) - (
        2.0 ** sequence_labels[first]
    )
    discount_gap = _discount(first + 1, log_base) - _discount(
        second + 1, log_base
    )
    return abs(gain_gap * discount_gap) / ideal


def _dcg(labels: Sequence[int], log_base: float) -> float:
    return math.fsum(
        (2.0**label - 1.0) * _discount(position, log_base)
        for position, label in enumerate(labels, start=1)
    )


def sbs_lambda_loss(rollout: RolloutRecord, log_base: float = 2.0) -> Tensor:
    """Step-by-step lambda loss over relevance-inverted pairs.

    For positions t_f < t_b with y[t_b] > y[t_f], both scores are read
    from the step-t_f score vector and the pair adds
    delta_NDCG * log(1 + exp(s_f - s_b)).
    """
    if not rollout.score_matrices:
        raise ValidationError("rollout has no score matrices")
    sequence = rollout.sequence_labels
    length = min(len(sequence), len(rollout.score_matrices))

    terms = []
    for front in range(length):
        scores = rollout.score_matrices[front]
        for back in range(front + 1, len(sequence)):
            if sequence[back] <= sequence[front]:
                continue
            delta = swap_ndcg_delta(sequence, front, back, log_base)
            gap = scores[rollout.chosen[front]] - scores[rollout.chosen[back]]
            terms.append(delta * F.softplus(gap))
    if not terms:
        return _graph_zero(rollout)
    return torch.stack(terms).sum()


def rerank_loss(
    rollout: RolloutRecord,
    eta: float,
    log_base: float = 2.0,
    use_attention_loss: bool = True,
    use_sbs_loss: bool = True,
) -> Tensor:
    """L_R = L_sa-att + eta * L_sbs (either part can be switched off)."""
    if not (use_attention_loss or use_sbs_loss):
        raise ValidationError("at least one reranking loss must be enabled")
    total = _graph_zero(rollout)
    if use_attention_loss:
        total = total + step_adaptive_attention_loss(rollout, log_base)
    if use_sbs_loss:
        total = total + eta * sbs_lambda_loss(rollout, log_base)
    return total


def tdcg(
    labels_in_rank_order: Sequence[int],
    gamma: GammaMap,
    x: int,
    log_base: float = 2.0,
) -> float:
    """Sum of gamma(y_t) / log(t + 1) over the first x positions."""
    if not 1 <= x <= len(labels_in_rank_order):
        raise ValidationError(
            f"TDCG cut-off {x} outside [1, {len(labels_in_rank_order)}]"
        )
    return math.fsum(
        gamma(label) * _discount(position, log_base)
        for position, label in enumerate(labels_in_rank_order[:x], start=1)
    )


def _two_point_softmax(first: float, second: float) -> tuple[float, float]:
    # The smaller probability is computed directly and the larger as its
    # complement so that the pair sums to exactly 1.0.
    gap = first - second
    decay = math.exp(-abs(gap))
    smaller = decay / (1.0 + decay)
    larger = 1.0 - smaller
    return (larger, smaller) if gap >= 0 else (smaller, larger)


def soft_cut_labels(
    rollout: RolloutRecord, gamma: GammaMap, log_base: float = 2.0
) -> SoftCutLabels:
    """RAML soft labels: softmax of (TDCG@T, TDCG@(T + window)).

    TDCG is evaluated on the local list: the prefix, the emitted document
    and the step's backward window.
    """
    sequence = rollout.sequence_labels
    pairs = []
    for step, window in enumerate(rollout.windows, start=1):
        local = sequence[:step] + [rollout.labels[i] for i in window]
        reward_cut = tdcg(local, gamma, step, log_base)
        reward_keep = tdcg(local, gamma, step + len(window), log_base)
        pairs.append(_two_point_softmax(reward_cut, reward_keep))
    return SoftCutLabels(pairs=tuple(pairs))


def truncation_loss(
    cut_probs: Sequence[Tensor], soft_labels: SoftCutLabels
) -> Tensor:
    """-sum_t [y_cut log p_1 + y_nocut log p_0], p clamped at 1e-12."""
    if len(cut_probs) != len(soft_labels.pairs):
        raise ValidationError(
            f"{len(cut_probs)} cut distributions for "
            f"{len(soft_labels.pairs)} soft labels"
        )
    probs = torch.stack(list(cut_probs))
    targets = torch.tensor(soft_labels.pairs, dtype=probs.dtype)
    log_p0 = torch.log(probs[:, 0].clamp(min=PROB_FLOOR))
    log_p1 = torch.log(probs[:, 1].clamp(min=PROB_FLOOR))
    return -(targets[:, 0] * log_p1 + targets[:, 1] * log_p0).sum()
