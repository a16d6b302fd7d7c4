#!/usr/bin/env python3
"""
File I/O: run configuration, datasets, checkpoints, traces, reports and
training histories.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Sequence

import torch
import yaml

from src.core.model import RerankTruncateModel, build_model
from src.core.trainer import EpochRecord
from src.core.types import (
    DECODE_MODES,
    METRIC_COLUMNS,
    CheckpointError,
    ConfigError,
    Dataset,
    DecodeTrace,
    EvalReport,
    ModelConfig,
    TrainConfig,
    TruncationPolicy,
    ValidationError,
)
from src.io.letor import parse_letor, write_letor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "rerank-cut-ckpt-1"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
HISTORY_COLUMNS = (
    "epoch",
    "phase",
    "loss_rerank",
    "loss_truncate",
    "val_ndcg@5",
    "val_tdcg",
)


@dataclass(frozen=True)
class RunSettings:
    """Paths and data-generation settings of a CLI run."""

    train_path: str = "data/train.txt"
    valid_path: str = "data/valid.txt"
    test_path: str = "data/test.txt"
    checkpoint_path: str = "checkpoints/model.pt"
    history_path: str = "checkpoints/history.csv"
    report_path: str = "reports/report.csv"
    trace_path: str = "reports/traces.jsonl"
    num_queries: int = 200
    list_size: int = 10
    grade_max: int = 4
    noise_sigma: float = 1.0
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    initial_score_feature: int | None = None
    policy: str = "model"
    mode: str = "full"
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        for key in ("policy", "mode", "log_level"):
            if not isinstance(getattr(self, key), str):
                raise ConfigError(f"run.{key} must be a string")
        if self.mode not in DECODE_MODES:
            raise ConfigError(
                f"run.mode must be one of {list(DECODE_MODES)}, "
                f"got {self.mode!r}"
            )
        try:
            TruncationPolicy.parse(self.policy)
        except ValidationError as e:
            raise ConfigError(f"run.policy: {e}") from None
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"unknown run.log_level {self.log_level!r}")
        if (
            len(self.split) != 3
            or any(f < 0 for f in self.split)
            or not math.isclose(math.fsum(self.split), 1.0, abs_tol=1e-9)
        ):
            raise ConfigError(
                f"run.split must be three fractions >= 0 summing to 1, "
                f"got {list(self.split)}"
            )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> RunSettings:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        values = dict(mapping)
        if "split" in values:
            try:
                values["split"] = tuple(float(v) for v in values["split"])
            except (TypeError, ValueError):
                raise ConfigError(
                    f"run.split must be a list of fractions, "
                    f"got {values['split']!r}"
                ) from None
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from None


@dataclass(frozen=True)
class RunConfig:
    """The three sections of a run configuration file."""

    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)


def _section(data: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    section = data.get(name) or {}
    if not isinstance(section, Mapping):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return section


def load_run_config(path: str) -> RunConfig:
    """Load a YAML run configuration with model/train/run sections."""
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' not found") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None

    if not isinstance(data, Mapping):
        raise ConfigError(f"config file '{path}' must contain a mapping")
    unknown = sorted(set(data) - {"model", "train", "run"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return RunConfig(
        model=ModelConfig.from_mapping(_section(data, "model")),
        train=TrainConfig.from_mapping(_section(data, "train")),
        run=RunSettings.from_mapping(_section(data, "run")),
    )


def save_model_config(config: ModelConfig, path: str) -> None:
    """Write a ModelConfig as a flat YAML mapping."""
    with open(path, "w") as f:
        yaml.safe_dump(config.to_mapping(), f, sort_keys=True)


def load_model_config(path: str) -> ModelConfig:
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"model config file '{path}' must be a mapping")
    return ModelConfig.from_mapping(data)


def load_dataset(path: str) -> Dataset:
    with open(path, "r") as f:
        dataset = parse_letor(f)
    logger.info(
        "loaded %s: %d queries, %d documents, %d features",
        path,
        len(dataset),
        dataset.num_docs,
        dataset.feature_dim,
    )
    return dataset


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def save_dataset(dataset: Dataset, path: str) -> None:
    _ensure_parent(path)
    with open(path, "w") as f:
        write_letor(dataset, f)


def save_checkpoint(
    model: RerankTruncateModel,
    path: str,
    epoch: int | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extras: Mapping[str, Any] | None = None,
) -> None:
    """Write named tensors with a shape manifest and the model config."""
    state = model.state_dict()
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_mapping(),
        "manifest": {name: list(t.shape) for name, t in state.items()},
        "tensors": {name: t.detach().clone() for name, t in state.items()},
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer else None,
        "extras": dict(extras or {}),
    }
    _ensure_parent(path)
    torch.save(payload, path)
    logger.debug("saved checkpoint %s (epoch %s)", path, epoch)


@dataclass
class Checkpoint:
    model: RerankTruncateModel
    epoch: int | None
    optimizer_state: dict | None
    extras: dict[str, Any]


def _check_manifest(
    manifest: Mapping[str, Sequence[int]], model: RerankTruncateModel
) -> None:
    expected = {
        name: list(t.shape) for name, t in model.state_dict().items()
    }
    for name, shape in expected.items():
        if name not in manifest:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        if list(manifest[name]) != shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {list(manifest[name])} in the "
                f"checkpoint, model expects {shape}"
            )
    for name in manifest:
        if name not in expected:
            raise CheckpointError(f"unexpected tensor '{name}' in checkpoint")


def load_checkpoint(
    path: str, config: ModelConfig | None = None
) -> Checkpoint:
    """Rebuild a model from a checkpoint.

    With ``config`` the tensors are checked against a model built from it;
    otherwise the stored model config is used.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None

    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')!r}, expected "
            f"{CHECKPOINT_VERSION!r}"
        )
    if config is None:
        config = ModelConfig.from_mapping(payload["model_config"])
    model = build_model(config)
    _check_manifest(payload["manifest"], model)
    model.load_state_dict(payload["tensors"])
    return Checkpoint(
        model=model,
        epoch=payload.get("epoch"),
        optimizer_state=payload.get("optimizer"),
        extras=dict(payload.get("extras") or {}),
    )


def write_traces(traces: Sequence[DecodeTrace], path: str) -> None:
    """One JSON object per query: qid, doc_ids, cut_step, p_cut."""
    _ensure_parent(path)
    with open(path, "w") as f:
        for trace in traces:
            record = {
                "qid": trace.qid,
                "doc_ids": list(trace.output_doc_ids),
                "cut_step": trace.cut_step,
                "p_cut": list(trace.p_cut),
            }
            f.write(json.dumps(record) + "\n")


def read_traces(path: str) -> list[dict[str, Any]]:
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def _cell(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def write_report(report: EvalReport, path: str) -> None:
    """CSV with a header, one row per query and a final mean row."""
    _ensure_parent(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("qid",) + METRIC_COLUMNS)
        for row in report.rows:
            writer.writerow(
                [row.qid] + [_cell(row.values[c]) for c in METRIC_COLUMNS]
            )
        mean = report.mean
        writer.writerow(["mean"] + [_cell(mean[c]) for c in METRIC_COLUMNS])


def write_history(history: Sequence[EpochRecord], path: str) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for record in history:
            writer.writerow(
                [
                    record.epoch,
                    record.phase,
                    _cell(record.loss_rerank),
                    _cell(record.loss_truncate),
                    _cell(record.val_ndcg5),
                    _cell(record.val_tdcg),
                ]
            )
