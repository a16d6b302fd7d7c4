#!/usr/bin/env python3
"""
Immutable data types, configuration and errors for the reranking-truncation
model.

Every symbol shared between modules lives here: documents and query lists,
the model and training configuration, the gain table used by TDCG, decode
traces and evaluation reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Mapping


class RerankCutError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RerankCutError, ValueError):
    """An input was rejected."""


class ConfigError(ValidationError):
    """A configuration mapping or file is invalid."""


class LetorParseError(ValidationError):
    """A LETOR line could not be parsed."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DecodeExhaustedError(RerankCutError):
    """Every candidate is already selected."""


class CheckpointError(RerankCutError):
    """A checkpoint does not match the model it is loaded into."""


class TrainingDivergedError(RerankCutError):
    """A training loss became non-finite."""

    def __init__(self, batch_id: str, loss: float):
        super().__init__(f"loss diverged ({loss}) at batch {batch_id}")
        self.batch_id = batch_id


DECODE_MODES = ("full", "rerank_only", "truncate_only", "fast")
TRAIN_TASKS = ("joint", "rerank", "truncate")
WEB_SEARCH_GAINS = {0: -4.0, 1: -2.0, 2: 2.0, 3: 3.0, 4: 4.0}
BINARY_GAINS = {0: -1.0, 1: 1.0}


@dataclass(frozen=True)
class GammaMap:
    """Gain table mapping relevance grades to TDCG gains."""

    mapping: dict[int, float]
    name: str | None = None

    def __call__(self, label: int) -> float:
        try:
            return self.mapping[int(label)]
        except KeyError:
            raise ValidationError(
                f"no gain defined for label {label} in gamma map"
            ) from None

    def covers(self, labels: Iterable[int]) -> bool:
        return all(int(label) in self.mapping for label in labels)

    @classmethod
    def web_search(cls) -> GammaMap:
        return cls(mapping=dict(WEB_SEARCH_GAINS), name="web")

    @classmethod
    def binary(cls) -> GammaMap:
        return cls(mapping=dict(BINARY_GAINS), name="binary")

    @classmethod
    def from_value(cls, value: Any) -> GammaMap:
        """Build from a preset name or an explicit label -> gain mapping."""
        if isinstance(value, GammaMap):
            return value
        if value == "web":
            return cls.web_search()
        if value == "binary":
            return cls.binary()
        if isinstance(value, Mapping):
            try:
                table = {int(k): float(v) for k, v in value.items()}
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid gamma_map entry: {e}") from None
            if not table:
                raise ConfigError("gamma_map must not be empty")
            return cls(mapping=table)
        raise ConfigError(
            f"gamma_map must be 'web', 'binary' or a mapping, got {value!r}"
        )

    def to_value(self) -> str | dict[int, float]:
        if self.name is not None:
            return self.name
        return dict(self.mapping)


@dataclass(frozen=True)
class FeatureDoc:
    """One candidate document of a query."""

    doc_id: str
    features: tuple[float, ...]
    label: int
    initial_score: float = 0.0


@dataclass(frozen=True)
class QueryList:
    """A query's candidate list, ordered by initial score."""

    qid: str
    docs: tuple[FeatureDoc, ...]

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def labels(self) -> list[int]:
        return [doc.label for doc in self.docs]

    @property
    def doc_ids(self) -> list[str]:
        return [doc.doc_id for doc in self.docs]


@dataclass(frozen=True)
class Dataset:
    """A collection of query lists sharing one feature space."""

    groups: tuple[QueryList, ...]
    feature_dim: int
    grade_max: int

    def __post_init__(self) -> None:
        qids = [group.qid for group in self.groups]
        if len(set(qids)) != len(qids):
            raise ValidationError("dataset contains duplicate qids")
        for group in self.groups:
            for doc in group.docs:
                if len(doc.features) != self.feature_dim:
                    raise ValidationError(
                        f"query {group.qid}: document {doc.doc_id} has "
                        f"{len(doc.features)} features, expected "
                        f"{self.feature_dim}"
                    )

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def num_docs(self) -> int:
        return sum(len(group) for group in self.groups)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, decoding and loss settings of the joint model."""

    feature_dim: int
    attention_dim: int = 256
    heads: int = 8
    encoder_blocks: int = 2
    decoder_blocks: int = 1
    rffn_hidden: int = 32
    beta: int = 4
    eta: float = 0.1
    max_list_len: int = 40
    lr: float = 1e-5
    batch_size: int = 16
    log_base: float = 2.0
    rel_pos_buckets: int = 16
    rel_pos_max_distance: int = 64
    gamma_map: GammaMap = field(default_factory=GammaMap.web_search)
    seed: int = 0
    cut_threshold: float = 0.5
    relevance_threshold: int = 1
    grade_max: int | None = None
    standardize: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.heads < 1 or self.attention_dim % self.heads != 0:
            raise ConfigError(
                f"attention_dim {self.attention_dim} is not divisible by "
                f"heads {self.heads}"
            )
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if not 0.0 < self.cut_threshold < 1.0:
            raise ConfigError("cut_threshold must lie in (0, 1)")
        if self.max_list_len < 1:
            raise ConfigError("max_list_len must be positive")
        if self.log_base <= 1.0:
            raise ConfigError("log_base must be > 1")
        if self.rel_pos_buckets < 4:
            raise ConfigError("rel_pos_buckets must be >= 4")
        if self.rel_pos_max_distance <= self.rel_pos_buckets // 4:
            raise ConfigError(
                "rel_pos_max_distance must exceed the exact-bucket range "
                f"({self.rel_pos_buckets // 4})"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def input_dim(self) -> int:
        """Width of an input embedding: features plus the initial score."""
        return self.feature_dim + 1

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> ModelConfig:
        """Build from a flat key-value mapping; unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        if "feature_dim" not in mapping:
            raise ConfigError("model config requires 'feature_dim'")
        values = dict(mapping)
        if "gamma_map" in values:
            values["gamma_map"] = GammaMap.from_value(values["gamma_map"])
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_mapping(self) -> dict[str, Any]:
        values: dict[str, Any] = {
            f.name: getattr(self, f.name) for f in fields(self)
        }
        values["gamma_map"] = self.gamma_map.to_value()
        return values


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule; lr and batch_size fall back to ModelConfig.

    ``tasks`` selects what is learned: ``joint`` (rerank-only first
    epoch, then alternating batches), ``rerank`` (reranking objective in
    every batch) or ``truncate`` (truncation objective only, on the input
    order).
    """

    epochs: int = 1
    batch_size: int | None = None
    lr: float | None = None
    alternation: str = "batch_parity"
    checkpoint_every: int = 0
    seed: int | None = None
    use_attention_loss: bool = True
    use_sbs_loss: bool = True
    tasks: str = "joint"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.tasks not in TRAIN_TASKS:
            raise ConfigError(
                f"tasks must be one of {list(TRAIN_TASKS)}, "
                f"got {self.tasks!r}"
            )
        if self.alternation != "batch_parity":
            raise ConfigError(
                f"unsupported alternation rule {self.alternation!r}"
            )
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not (self.use_attention_loss or self.use_sbs_loss):
            raise ConfigError("at least one reranking loss must be enabled")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        try:
            return cls(**dict(mapping))
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def resolved_lr(self, model_config: ModelConfig) -> float:
        return self.lr if self.lr is not None else model_config.lr

    def resolved_batch_size(self, model_config: ModelConfig) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return model_config.batch_size

    def resolved_seed(self, model_config: ModelConfig) -> int:
        return self.seed if self.seed is not None else model_config.seed


@dataclass(frozen=True)
class PhaseMask:
    """Parameter name prefixes excluded from updates in one batch."""

    frozen: frozenset[str] = frozenset()

    def is_frozen(self, parameter_name: str) -> bool:
        return any(
            parameter_name == prefix or parameter_name.startswith(prefix)
            for prefix in self.frozen
        )


@dataclass(frozen=True)
class TruncationPolicy:
    """How the output list is cut: by the model, at fixed x, or by oracle."""

    kind: str = "model"
    x: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("model", "fixed", "oracle"):
            raise ValidationError(f"unknown truncation policy {self.kind!r}")
        if self.kind == "fixed" and (self.x is None or self.x < 1):
            raise ValidationError("fixed truncation requires x >= 1")

    @classmethod
    def parse(cls, text: str) -> TruncationPolicy:
        """Parse 'model', 'oracle' or 'fixed:<x>'."""
        if text.startswith("fixed:"):
            try:
                return cls(kind="fixed", x=int(text.split(":", 1)[1]))
            except ValueError:
                raise ValidationError(
                    f"invalid fixed policy {text!r}"
                ) from None
        return cls(kind=text)

    def __str__(self) -> str:
        return f"fixed:{self.x}" if self.kind == "fixed" else self.kind


@dataclass(frozen=True)
class DecodeTrace:
    """Record of one query's generation steps."""

    qid: str
    chosen: tuple[int, ...]
    score_matrices: tuple[tuple[float, ...], ...]
    cut_probs: tuple[tuple[float, float], ...]
    cut_step: int
    num_candidates: int
    mode: str = "full"
    doc_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.chosen)) != len(self.chosen):
            raise ValidationError(f"query {self.qid}: duplicate selections")
        if not 1 <= self.cut_step <= self.num_candidates:
            raise ValidationError(
                f"query {self.qid}: cut step {self.cut_step} outside "
                f"[1, {self.num_candidates}]"
            )
        if self.cut_step > len(self.chosen):
            raise ValidationError(
                f"query {self.qid}: cut step beyond generated steps"
            )
        for p_0, p_1 in self.cut_probs:
            if abs(p_0 + p_1 - 1.0) > 1e-6:
                raise ValidationError(
                    f"query {self.qid}: cut probabilities do not sum to 1"
                )

    @property
    def output(self) -> tuple[int, ...]:
        """Indices of the returned (cut) list."""
        return self.chosen[: self.cut_step]

    @property
    def output_doc_ids(self) -> tuple[str, ...]:
        return self.doc_ids[: self.cut_step]

    @property
    def p_cut(self) -> tuple[float, ...]:
        return tuple(p_1 for _, p_1 in self.cut_probs)

    def with_cut(self, cut_step: int) -> DecodeTrace:
        return DecodeTrace(
            qid=self.qid,
            chosen=self.chosen,
            score_matrices=self.score_matrices,
            cut_probs=self.cut_probs,
            cut_step=cut_step,
            num_candidates=self.num_candidates,
            mode=self.mode,
            doc_ids=self.doc_ids,
        )


METRIC_COLUMNS = (
    "ndcg@1",
    "ndcg@5",
    "ndcg@10",
    "err@5",
    "err@10",
    "map",
    "recall@5",
    "recall@10",
    "tdcg",
    "output_length",
)


@dataclass(frozen=True)
class EvalRow:
    """Metric values for one query."""

    qid: str
    values: dict[str, float]


@dataclass(frozen=True)
class EvalReport:
    """Per-query metric rows plus their mean."""

    rows: tuple[EvalRow, ...]

    @property
    def mean(self) -> dict[str, float]:
        if not self.rows:
            return {name: 0.0 for name in METRIC_COLUMNS}
        return {
            name: math.fsum(row.values[name] for row in self.rows)
            / len(self.rows)
            for name in METRIC_COLUMNS
        }


def _canonical_key(doc: FeatureDoc) -> tuple[float, str]:
    return (-doc.initial_score, doc.doc_id)


def canonicalize(query_list: QueryList) -> QueryList:
    """Sort by initial score descending, ties by doc_id ascending."""
    return QueryList(
        qid=query_list.qid,
        docs=tuple(sorted(query_list.docs, key=_canonical_key)),
    )


def validate_query_list(
    query_list: QueryList, config: ModelConfig
) -> QueryList:
    """Check a query list and return its canonical, length-capped form."""
    if not query_list.docs:
        raise ValidationError(f"query {query_list.qid}: empty query group")
    seen: set[str] = set()
    for doc in query_list.docs:
        if len(doc.features) != config.feature_dim:
            raise ValidationError(
                f"query {query_list.qid}: document {doc.doc_id} has "
                f"{len(doc.features)} features, expected "
                f"{config.feature_dim}"
            )
        if doc.label < 0:
            raise ValidationError(
                f"query {query_list.qid}: negative label on {doc.doc_id}"
            )
        if doc.doc_id in seen:
            raise ValidationError(
                f"query {query_list.qid}: duplicate doc_id {doc.doc_id}"
            )
        seen.add(doc.doc_id)
    ordered = canonicalize(query_list)
    return QueryList(
        qid=ordered.qid, docs=ordered.docs[: config.max_list_len]
    )


def check_gamma_coverage(dataset: Dataset, gamma: GammaMap) -> None:
    """Raise ConfigError if a grade in the dataset has no gain."""
    labels = {doc.label for group in dataset.groups for doc in group.docs}
    if gamma.covers(labels):
        return
    missing = sorted(label for label in labels if label not in gamma.mapping)
    raise ConfigError(f"gamma_map has no gain for grades {missing}")
