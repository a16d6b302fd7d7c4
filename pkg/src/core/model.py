#!/usr/bin/env python3
"""
The joint reranking-truncation model and its parameter groups.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from src.core.decoder import SequentialDependencyDecoder
from src.core.encoder import (
    EmbeddingHook,
    GlobalDependencyEncoder,
    embed_inputs,
)
from src.core.types import ModelConfig, PhaseMask, QueryList

# Parameter-name prefixes of the two groups frozen by the training schedule.
TRUNCATION_MODULE = "decoder.truncation."
CROSS_RANKING_FFN = "decoder.rffn."

RERANK_PHASE = "rerank"
TRUNCATE_PHASE = "truncate"


def torch_dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


class RerankTruncateModel(nn.Module):
    """Encoder plus decoder; all learnable weights of the joint model."""

    def __init__(
        self,
        config: ModelConfig,
        embedding_hook: EmbeddingHook | None = None,
    ):
        super().__init__()
        self.config = config
        self.embedding_hook = embedding_hook
        self.encoder = GlobalDependencyEncoder(config)
        self.decoder = SequentialDependencyDecoder(config)
        self.to(self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.config.dtype)

    def embed(self, query_list: QueryList) -> Tensor:
        return embed_inputs(
            query_list,
            self.dtype,
            self.embedding_hook,
            input_dim=self.config.input_dim,
        )


def build_model(
    config: ModelConfig, embedding_hook: EmbeddingHook | None = None
) -> RerankTruncateModel:
    """Construct a model with weights drawn from ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return RerankTruncateModel(config, embedding_hook)


def phase_mask(phase: str) -> PhaseMask:
    """Parameters held fixed while optimizing the given phase."""
    if phase == RERANK_PHASE:
        return PhaseMask(frozen=frozenset({TRUNCATION_MODULE}))
    if phase == TRUNCATE_PHASE:
        return PhaseMask(frozen=frozenset({CROSS_RANKING_FFN}))
    return PhaseMask()
