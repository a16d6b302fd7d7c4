#!/usr/bin/env python3
"""
LETOR / SVMLight ranking files and synthetic datasets.

Line format: ``<label> qid:<id> <idx>:<val> ... [#docid=<id> score=<l>]``
with 1-based, possibly sparse feature indices.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from src.core.types import (
    Dataset,
    FeatureDoc,
    LetorParseError,
    QueryList,
    ValidationError,
    canonicalize,
)

Scorer = Callable[[FeatureDoc], float]


def _parse_comment(comment: str) -> dict[str, str]:
    fields = {}
    for token in comment.split():
        key, sep, value = token.partition("=")
        if sep:
            fields[key] = value
    return fields


def parse_letor(stream: Iterable[str]) -> Dataset:
    """Parse LETOR lines into canonicalized query lists.

    Missing features are filled with 0.0. The initial score comes from a
    ``score=`` comment field and defaults to 0.0; doc ids come from
    ``docid=`` or default to ``<qid>:<line number>``.
    """
    rows: dict[str, list[tuple[str, dict[int, float], int, float]]] = {}
    max_index = 0

    for line_number, raw in enumerate(stream, start=1):
        body, _, comment = raw.partition("#")
        tokens = body.split()
        if not tokens:
            continue
        if len(tokens) < 2 or not tokens[1].startswith("qid:"):
            raise LetorParseError(
                line_number, "expected '<label> qid:<id> <idx>:<val> ...'"
            )
        try:
            label = int(tokens[0])
        except ValueError:
            raise LetorParseError(
                line_number, f"non-integer label {tokens[0]!r}"
            ) from None
        if label < 0:
            raise LetorParseError(line_number, f"negative label {label}")
        qid = tokens[1][len("qid:") :]
        if not qid:
            raise LetorParseError(line_number, "empty qid")

        features: dict[int, float] = {}
        for token in tokens[2:]:
            index_text, sep, value_text = token.partition(":")
            try:
                if not sep:
                    raise ValueError
                index = int(index_text)
                value = float(value_text)
            except ValueError:
                raise LetorParseError(
                    line_number, f"malformed feature {token!r}"
                ) from None
            if index < 1:
                raise LetorParseError(
                    line_number, f"feature index {index} is not 1-based"
                )
            features[index] = value
            max_index = max(max_index, index)

        extra = _parse_comment(comment)
        doc_id = extra.get("docid", f"{qid}:{line_number}")
        try:
            score = float(extra.get("score", 0.0))
        except ValueError:
            raise LetorParseError(
                line_number, f"malformed score {extra['score']!r}"
            ) from None
        group = rows.setdefault(qid, [])
        if any(existing[0] == doc_id for existing in group):
            raise LetorParseError(
                line_number, f"duplicate doc id {doc_id} in query {qid}"
            )
        group.append((doc_id, features, label, score))

    groups = []
    grade_max = 0
    for qid, docs in rows.items():
        query_docs = []
        for doc_id, features, label, score in docs:
            dense = tuple(
                features.get(index, 0.0) for index in range(1, max_index + 1)
            )
            query_docs.append(FeatureDoc(doc_id, dense, label, score))
            grade_max = max(grade_max, label)
        groups.append(canonicalize(QueryList(qid, tuple(query_docs))))
    return Dataset(
        groups=tuple(groups), feature_dim=max_index, grade_max=grade_max
    )


def write_letor(dataset: Dataset, sink: TextIO) -> None:
    """Write every document as one LETOR line, dense features."""
    for group in dataset.groups:
        for doc in group.docs:
            features = " ".join(
                f"{index}:{value!r}"
                for index, value in enumerate(doc.features, start=1)
            )
            parts = [str(doc.label), f"qid:{group.qid}"]
            if features:
                parts.append(features)
            parts.append(f"#docid={doc.doc_id} score={doc.initial_score!r}")
            sink.write(" ".join(parts) + "\n")


def attach_initial_scores(dataset: Dataset, scorer: Scorer) -> Dataset:
    """Replace every initial score with ``scorer(doc)`` and re-sort."""
    groups = tuple(
        canonicalize(
            QueryList(
                group.qid,
                tuple(
                    replace(doc, initial_score=float(scorer(doc)))
                    for doc in group.docs
                ),
            )
        )
        for group in dataset.groups
    )
    return replace(dataset, groups=groups)


def feature_scorer(index: int) -> Scorer:
    """Scorer reading one 1-based feature as the first-stage score."""

    def score(doc: FeatureDoc) -> float:
        return doc.features[index - 1]

    return score


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic(
    num_queries: int,
    list_size: int,
    feature_dim: int,
    grade_max: int,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Learnable synthetic lists.

    A seed-derived weight vector w gives label = round(grade_max *
    sigmoid(w.x)) clamped to [0, grade_max]; the initial score is w.x plus
    Gaussian noise of scale noise_sigma.
    """
    if min(num_queries, list_size, feature_dim, grade_max) < 1:
        raise ValidationError("synthetic dataset counts must be positive")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")

    rng = np.random.default_rng(seed)
    weights = rng.normal(size=feature_dim)
    groups = []
    for q in range(num_queries):
        qid = str(q + 1)
        features = rng.normal(size=(list_size, feature_dim))
        linear = features @ weights
        noise = rng.normal(size=list_size)
        labels = np.clip(
            np.rint(grade_max * _sigmoid(linear)), 0, grade_max
        ).astype(int)
        scores = linear + noise_sigma * noise
        docs = tuple(
            FeatureDoc(
                doc_id=f"{qid}-{i:03d}",
                features=tuple(float(v) for v in features[i]),
                label=int(labels[i]),
                initial_score=float(scores[i]),
            )
            for i in range(list_size)
        )
        groups.append(canonicalize(QueryList(qid, docs)))
    return Dataset(
        groups=tuple(groups),
        feature_dim=feature_dim,
        grade_max=max(
            (doc.label for group in groups for doc in group.docs), default=0
        ),
    )


FeatureStats = tuple[tuple[float, ...], tuple[float, ...]]


def feature_statistics(dataset: Dataset) -> FeatureStats:
    """Per-feature mean and standard deviation (1.0 where constant)."""
    matrix = np.array(
        [doc.features for group in dataset.groups for doc in group.docs],
        dtype=float,
    ).reshape(-1, dataset.feature_dim)
    if matrix.shape[0] == 0:
        raise ValidationError("cannot standardize an empty dataset")
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std[std == 0.0] = 1.0
    return tuple(mean.tolist()), tuple(std.tolist())


def standardize_features(
    dataset: Dataset, stats: FeatureStats | None = None
) -> tuple[Dataset, FeatureStats]:
    """Z-score every feature; pass training ``stats`` for other splits."""
    if stats is None:
        stats = feature_statistics(dataset)
    mean, std = stats
    if len(mean) != dataset.feature_dim:
        raise ValidationError(
            f"standardization stats cover {len(mean)} features, dataset "
            f"has {dataset.feature_dim}"
        )
    groups = tuple(
        QueryList(
            group.qid,
            tuple(
                replace(
                    doc,
                    features=tuple(
                        (value - m) / s
                        for value, m, s in zip(doc.features, mean, std)
                    ),
                )
                for doc in group.docs
            ),
        )
        for group in dataset.groups
    )
    return replace(dataset, groups=groups), stats


def split_dataset(
    dataset: Dataset, fractions: Sequence[float]
) -> tuple[Dataset, ...]:
    """Consecutive splits by group; rounding remainder goes to the first."""
    if any(f < 0 for f in fractions) or not math.isclose(
        math.fsum(fractions), 1.0, abs_tol=1e-9
    ):
        raise ValidationError(
            f"split fractions {list(fractions)} must be >= 0 and sum to 1"
        )
    total = len(dataset)
    counts = [math.floor(round(f * total, 9)) for f in fractions]
    counts[0] += total - sum(counts)

    splits = []
    start = 0
    for count in counts:
        groups = dataset.groups[start : start + count]
        start += count
        splits.append(
            Dataset(
                groups=groups,
                feature_dim=dataset.feature_dim,
                grade_max=max(
                    (doc.label for g in groups for doc in g.docs), default=0
                ),
            )
        )
    return tuple(splits)
