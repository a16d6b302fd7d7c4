#!/usr/bin/env python3
"""
Global dependency encoder: input embeddings, transfer layer and the
pre-norm self-attention stack producing list-level contextual rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from src.core.types import ModelConfig, QueryList, ValidationError

# Output projections start this fraction of the default fan-in bound.
OUTPUT_INIT_SCALE = 1e-2

EmbeddingHook = Callable[[QueryList], "list[list[float]] | Tensor"]


@dataclass(frozen=True)
class EncoderOutput:
    """Row-aligned encoder tensors for one query list."""

    U: Tensor
    X: Tensor
    O: Tensor


class MultiHeadSelfAttention(nn.Module):
    """Multi-head self-attention over the rows of a single (L, dim) input.

    An optional ``position_bias`` module maps a sequence length to a
    (heads, L, L) tensor added to the attention logits.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        position_bias: nn.Module | None = None,
    ):
        super().__init__()
        if dim % heads != 0:
            raise ValidationError(
                f"dimension {dim} is not divisible by {heads} heads"
            )
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.position_bias = position_bias

        bound = OUTPUT_INIT_SCALE / math.sqrt(dim)
        nn.init.uniform_(self.out.weight, -bound, bound)
        nn.init.zeros_(self.out.bias)

    def _split(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        return x.view(length, self.heads, self.head_dim).transpose(0, 1)

    def forward(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))

        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if self.position_bias is not None:
            logits = logits + self.position_bias(length)
        weights = torch.softmax(logits, dim=-1)

        context = (weights @ v).transpose(0, 1).reshape(length, self.dim)
        return self.out(context)


class SelfAttentionBlock(nn.Module):
    """Residual pre-norm block: X + MHSA(LN(X))."""

    def __init__(
        self,
        dim: int,
        heads: int,
        position_bias: nn.Module | None = None,
    ):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attention = MultiHeadSelfAttention(dim, heads, position_bias)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.attention(self.norm(x))


class TransferLayer(nn.Module):
    """Swish(affine(U)), mapping input embeddings to the attention width."""

    def __init__(self, input_dim: int, attention_dim: int):
        super().__init__()
        self.linear = nn.Linear(input_dim, attention_dim)

    def forward(self, u: Tensor) -> Tensor:
        return F.silu(self.linear(u))


class GlobalDependencyEncoder(nn.Module):
    """Transfer layer followed by the encoder self-attention blocks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.transfer = TransferLayer(config.input_dim, config.attention_dim)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.attention_dim, config.heads)
            for _ in range(config.encoder_blocks)
        )

    def encode(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, u: Tensor) -> EncoderOutput:
        x = self.transfer(u)
        return EncoderOutput(U=u, X=x, O=self.encode(x))


def embed_inputs(
    query_list: QueryList,
    dtype: torch.dtype = torch.float32,
    hook: EmbeddingHook | None = None,
    input_dim: int | None = None,
) -> Tensor:
    """Build U: one row per document, features followed by the score.

    When ``hook`` is given it supplies the rows instead (precomputed
    query-document vectors). With ``input_dim`` the row width is checked.
    """
    if hook is not None:
        u = torch.as_tensor(hook(query_list), dtype=dtype)
        if u.dim() != 2 or u.shape[0] != len(query_list):
            raise ValidationError(
                f"query {query_list.qid}: embedding hook returned shape "
                f"{tuple(u.shape)} for {len(query_list)} documents"
            )
    else:
        rows = [
            list(doc.features) + [doc.initial_score]
            for doc in query_list.docs
        ]
        u = torch.tensor(rows, dtype=dtype)

    if input_dim is not None and u.shape[-1] != input_dim:
        source = "embedding hook" if hook is not None else "features"
        raise ValidationError(
            f"query {query_list.qid}: {source} gave width {u.shape[-1]}, "
            f"model expects {input_dim}"
        )

    finite = torch.isfinite(u).all(dim=1)
    if not bool(finite.all()):
        row = int((~finite).nonzero()[0, 0])
        raise ValidationError(
            f"query {query_list.qid}: non-finite input in row {row}"
        )
    return u
