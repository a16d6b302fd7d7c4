#!/usr/bin/env python3
"""
Sequential dependency decoder.

At every step the decoder scores the remaining candidates against the
prefix generated so far, emits the best one, and asks the truncation
module whether the list should end at that document.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
from torch import Tensor, nn

from src.core.encoder import SelfAttentionBlock, TransferLayer
from src.core.types import (
    DECODE_MODES,
    DecodeExhaustedError,
    DecodeTrace,
    ModelConfig,
    QueryList,
    ValidationError,
    validate_query_list,
)

if TYPE_CHECKING:
    from src.core.model import RerankTruncateModel

MASKED_SCORE = -1e9


def relative_position_bucket(
    relative_position: Tensor, num_buckets: int, max_distance: int
) -> Tensor:
    """Map signed offsets to buckets: exact near zero, log-spaced beyond.

    Half of the buckets hold positive offsets. Within each half, the first
    quarter of ``num_buckets`` are exact distances and the rest cover
    distances up to ``max_distance`` logarithmically; larger distances
    share the last bucket.
    """
    half = num_buckets // 2
    buckets = (relative_position > 0).to(torch.long) * half
    distance = relative_position.abs()

    max_exact = half // 2
    is_small = distance < max_exact
    scaled = (
        torch.log(distance.clamp(min=1).to(torch.float64) / max_exact)
        / math.log(max_distance / max_exact)
        * (half - max_exact)
    )
    large = (max_exact + scaled.to(torch.long)).clamp(max=half - 1)
    return buckets + torch.where(is_small, distance, large)


class RelativePositionBias(nn.Module):
    """Learnable per-head scalar for every relative-position bucket."""

    def __init__(self, heads: int, num_buckets: int, max_distance: int):
        super().__init__()
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.table = nn.Embedding(num_buckets, heads)
        nn.init.zeros_(self.table.weight)

    def forward(self, length: int) -> Tensor:
        positions = torch.arange(length)
        relative = positions[:, None] - positions[None, :]
        buckets = relative_position_bucket(
            relative, self.num_buckets, self.max_distance
        )
        return self.table(buckets).permute(2, 0, 1)


class TruncationModule(nn.Module):
    """Relative-position self-attention over G and a two-way cut head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        bias = RelativePositionBias(
            config.heads, config.rel_pos_buckets, config.rel_pos_max_distance
        )
        self.block = SelfAttentionBlock(
            config.attention_dim, config.heads, position_bias=bias
        )
        self.head = nn.Linear(config.attention_dim, 2)

    @property
    def rel_pos_table(self) -> RelativePositionBias:
        bias = self.block.attention.position_bias
        assert isinstance(bias, RelativePositionBias)
        return bias

    def forward(self, g: Tensor, position: int) -> Tensor:
        j = self.block(g)
        return torch.softmax(self.head(j[position]), dim=-1)


class SequentialDependencyDecoder(nn.Module):
    """Prefix attention, latent cross, cross ranking FFN and truncation."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.attention_dim
        self.start_vector = nn.Parameter(torch.empty(config.input_dim))
        nn.init.normal_(self.start_vector, std=0.02)
        self.prefix_blocks = nn.ModuleList(
            SelfAttentionBlock(width, config.heads)
            for _ in range(config.decoder_blocks)
        )
        self.latent_cross_mlp = nn.Linear(width, width)
        self.ffn_swish = TransferLayer(config.input_dim, width)
        self.rffn = nn.Sequential(
            nn.Linear(2 * width, config.rffn_hidden),
            nn.SiLU(),
            nn.Linear(config.rffn_hidden, 1),
        )
        self.truncation = TruncationModule(config)

    def sequential_dependency(
        self, prefix_u: Tensor, transfer: TransferLayer
    ) -> Tensor:
        """m for the current step; the start vector when nothing is chosen.

        ``transfer`` is the encoder's transfer layer, shared with the
        decoder.
        """
        if prefix_u.shape[0] == 0:
            return transfer(self.start_vector.unsqueeze(0))[0]
        x = transfer(prefix_u)
        for block in self.prefix_blocks:
            x = block(x)
        return x[-1]

    def latent_cross(self, u: Tensor, o: Tensor) -> Tensor:
        """I = (1 + MLP(O)) * FFN-Swish(U)."""
        return (1.0 + self.latent_cross_mlp(o)) * self.ffn_swish(u)

    def score_candidates(self, i: Tensor, m: Tensor, mask: Tensor) -> Tensor:
        """S = rFFN(concat(I, M)); selected rows get MASKED_SCORE."""
        expanded = m.unsqueeze(0).expand(i.shape[0], -1)
        scores = self.rffn(torch.cat([i, expanded], dim=-1)).squeeze(-1)
        return scores.masked_fill(mask, MASKED_SCORE)

    def truncation_decision(
        self, forward_rows: Tensor, current_row: Tensor, window_rows: Tensor
    ) -> Tensor:
        """(p_0, p_1) for cutting after the current document."""
        g = torch.cat(
            [forward_rows, current_row.unsqueeze(0), window_rows], dim=0
        )
        return self.truncation(g, position=forward_rows.shape[0])


def dynamic_rank(scores: Tensor, mask: Tensor) -> list[int]:
    """Unselected candidate indices by descending score, ties by index."""
    values = scores.detach().tolist()
    masked = mask.tolist()
    candidates = [i for i in range(len(values)) if not masked[i]]
    if not candidates:
        raise DecodeExhaustedError("decode exhausted")
    return sorted(candidates, key=lambda i: (-values[i], i))


def backward_window(ranking: list[int], beta: int) -> list[int]:
    """The next-best candidates after the emitted one, at most beta."""
    return ranking[1 : 1 + beta]


def _selection_mask(chosen: list[int], n: int) -> Tensor:
    mask = torch.zeros(n, dtype=torch.bool)
    if chosen:
        mask[chosen] = True
    return mask


def _rows(x: Tensor, indices: list[int]) -> Tensor:
    return x.index_select(0, torch.tensor(indices, dtype=torch.long))


@dataclass
class Generation:
    """Tensor-level result of one generation run (gradients intact)."""

    query_list: QueryList
    chosen: list[int]
    scores: list[Tensor]
    cut_probs: list[Tensor]
    windows: list[list[int]]
    cut_step: int


def generate(
    model: RerankTruncateModel,
    query_list: QueryList,
    mode: str = "full",
    with_truncation: bool = True,
    exhaustive: bool = False,
) -> Generation:
    """Run the decoder on one list.

    full: generate until the cut probability exceeds the threshold (the
    cut document is kept) or every document is emitted. rerank_only:
    emit all documents, cut ignored. truncate_only: keep the input order
    and consult only the truncation module. fast: order by the first
    step's scores, no further steps and no cut.

    With ``exhaustive`` the full and truncate_only modes keep generating
    after the first cut; ``cut_step`` still records that cut.
    """
    if mode not in DECODE_MODES:
        raise ValidationError(f"unknown decode mode {mode!r}")
    config = model.config
    canonical = validate_query_list(query_list, config)
    n = len(canonical)
    u = model.embed(canonical)
    encoded = model.encoder(u)
    decoder = model.decoder
    transfer = model.encoder.transfer

    if mode == "fast":
        mask = _selection_mask([], n)
        m = decoder.sequential_dependency(_rows(u, []), transfer)
        cross = decoder.latent_cross(u, encoded.O)
        scores = decoder.score_candidates(cross, m, mask)
        return Generation(
            query_list=canonical,
            chosen=dynamic_rank(scores, mask),
            scores=[scores],
            cut_probs=[],
            windows=[],
            cut_step=n,
        )

    if mode == "truncate_only":
        initial = torch.tensor(
            [doc.initial_score for doc in canonical.docs], dtype=u.dtype
        )
    else:
        cross = decoder.latent_cross(u, encoded.O)

    chosen: list[int] = []
    step_scores: list[Tensor] = []
    cut_probs: list[Tensor] = []
    windows: list[list[int]] = []
    cut_step: int | None = None

    for step in range(1, n + 1):
        mask = _selection_mask(chosen, n)
        if mode == "truncate_only":
            scores = initial.masked_fill(mask, MASKED_SCORE)
            ranking = list(range(step - 1, n))
        else:
            m = decoder.sequential_dependency(_rows(u, chosen), transfer)
            scores = decoder.score_candidates(cross, m, mask)
            ranking = dynamic_rank(scores, mask)
        current = ranking[0]
        window = backward_window(ranking, config.beta)
        step_scores.append(scores)
        windows.append(window)

        cut = False
        if with_truncation:
            probs = decoder.truncation_decision(
                _rows(encoded.O, chosen),
                encoded.O[current],
                _rows(encoded.O, window),
            )
            cut_probs.append(probs)
            cut = mode != "rerank_only" and (
                float(probs[1]) > config.cut_threshold
            )

        chosen.append(current)
        if cut and cut_step is None:
            cut_step = step
            if not exhaustive:
                break

    return Generation(
        query_list=canonical,
        chosen=chosen,
        scores=step_scores,
        cut_probs=cut_probs,
        windows=windows,
        cut_step=cut_step if cut_step is not None else n,
    )


def decode(
    query_list: QueryList,
    model: RerankTruncateModel,
    mode: str = "full",
    exhaustive: bool = False,
) -> DecodeTrace:
    """Greedy inference for one list, returned as a DecodeTrace."""
    with torch.no_grad():
        generation = generate(
            model, query_list, mode=mode, exhaustive=exhaustive
        )
    canonical = generation.query_list
    return DecodeTrace(
        qid=canonical.qid,
        chosen=tuple(generation.chosen),
        score_matrices=tuple(
            tuple(float(v) for v in scores.tolist())
            for scores in generation.scores
        ),
        cut_probs=tuple(
            (float(probs[0]), float(probs[1]))
            for probs in generation.cut_probs
        ),
        cut_step=generation.cut_step,
        num_candidates=len(canonical),
        mode=mode,
        doc_ids=tuple(canonical.docs[i].doc_id for i in generation.chosen),
    )
