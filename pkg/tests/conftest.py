"""
Shared fixtures: miniature model configs and hand-built query lists.
"""

from __future__ import annotations

import pytest

from src.core.model import build_model
from src.core.types import Dataset, FeatureDoc, ModelConfig, QueryList
from src.io.letor import generate_synthetic


def make_list(
    qid: str,
    labels: list[int],
    scores: list[float] | None = None,
    feature_dim: int = 3,
) -> QueryList:
    """Query list with deterministic features derived from the position."""
    if scores is None:
        scores = [float(len(labels) - i) for i in range(len(labels))]
    docs = tuple(
        FeatureDoc(
            doc_id=f"{qid}-d{i}",
            features=tuple(
                ((i + 1) * (j + 2) % 7) / 7.0 - 0.4 + 0.1 * labels[i]
                for j in range(feature_dim)
            ),
            label=label,
            initial_score=score,
        )
        for i, (label, score) in enumerate(zip(labels, scores))
    )
    return QueryList(qid=qid, docs=docs)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        feature_dim=3,
        attention_dim=8,
        heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        rffn_hidden=4,
        beta=1,
        max_list_len=10,
        lr=1e-3,
        batch_size=2,
        rel_pos_buckets=8,
        rel_pos_max_distance=16,
        dtype="float64",
        seed=0,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture
def small_dataset() -> Dataset:
    return generate_synthetic(
        num_queries=6,
        list_size=5,
        feature_dim=3,
        grade_max=4,
        noise_sigma=1.0,
        seed=1,
    )
