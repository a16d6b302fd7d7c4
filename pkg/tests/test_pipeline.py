#!/usr/bin/env python3
"""
Tests for policy-driven inference and evaluation.
"""

import math
from dataclasses import replace

import pytest

from src.core.decoder import decode
from src.core.model import build_model
from src.core.pipeline import (
    apply_policy,
    decode_with_policy,
    oracle_cut,
    run_pipeline,
)
from src.core.types import (
    ConfigError,
    Dataset,
    DecodeTrace,
    GammaMap,
    TruncationPolicy,
    ValidationError,
)
from tests.conftest import make_list


class TestOracleCut:
    """Test the TDCG-maximizing cut-off."""

    @pytest.mark.parametrize(
        "labels, expected",
        [
            ([4, 0, 0, 3], 1),
            ([0, 4], 2),
            ([3, 2, 0], 2),
            ([0, 0, 0], 1),
        ],
    )
    def test_web_search(self, labels, expected):
        assert oracle_cut(labels, GammaMap.web_search()) == expected

    def test_empty(self):
        with pytest.raises(ValidationError):
            oracle_cut([], GammaMap.web_search())


class TestApplyPolicy:
    """Test re-cutting a complete ordering."""

    def _trace(self):
        return DecodeTrace(
            qid="q",
            chosen=(2, 0, 1),
            score_matrices=(),
            cut_probs=(),
            cut_step=3,
            num_candidates=3,
        )

    def test_fixed_is_capped_by_length(self):
        query_list = make_list("q", [0, 1, 4])
        gamma = GammaMap.web_search()
        trace = self._trace()
        fixed_2 = TruncationPolicy("fixed", 2)
        fixed_9 = TruncationPolicy("fixed", 9)
        assert apply_policy(trace, query_list, fixed_2, gamma).cut_step == 2
        assert apply_policy(trace, query_list, fixed_9, gamma).cut_step == 3

    def test_oracle(self):
        query_list = make_list("q", [0, 1, 4])
        trace = self._trace()
        oracle = TruncationPolicy("oracle")
        recut = apply_policy(trace, query_list, oracle, GammaMap.web_search())
        # ranked labels are [4, 0, 1]
        assert recut.cut_step == 1

    def test_model_policy_unchanged(self):
        trace = self._trace()
        assert (
            apply_policy(
                trace,
                make_list("q", [0, 1, 4]),
                TruncationPolicy("model"),
                GammaMap.web_search(),
            )
            is trace
        )


class TestRunPipeline:
    """Test whole-dataset evaluation under every policy."""

    def test_fixed_policy(self, tiny_model, small_dataset):
        result = run_pipeline(
            small_dataset, tiny_model, TruncationPolicy("fixed", 3)
        )
        assert len(result.report.rows) == len(small_dataset)
        assert all(
            row.values["output_length"] == 3.0 for row in result.report.rows
        )

    def test_baselines_share_the_rerank_order(
        self, tiny_model, small_dataset
    ):
        fixed = run_pipeline(
            small_dataset, tiny_model, TruncationPolicy("fixed", 2)
        )
        oracle = run_pipeline(
            small_dataset, tiny_model, TruncationPolicy("oracle")
        )
        for a, b in zip(fixed.traces, oracle.traces):
            assert a.chosen == b.chosen
        for a, b in zip(fixed.report.rows, oracle.report.rows):
            assert b.values["tdcg"] >= a.values["tdcg"]
            assert a.values["ndcg@5"] == b.values["ndcg@5"]

    def test_oracle_bounds_model_policy(self, tiny_model, small_dataset):
        model = run_pipeline(small_dataset, tiny_model, TruncationPolicy())
        oracle = run_pipeline(
            small_dataset, tiny_model, TruncationPolicy("oracle")
        )
        assert model.report.mean["tdcg"] <= oracle.report.mean["tdcg"] + (
            1e-12
        )

    def test_model_policy_output_lengths(self, tiny_model, small_dataset):
        result = run_pipeline(small_dataset, tiny_model, TruncationPolicy())
        for trace, query_list in zip(result.traces, result.lists):
            assert 1 <= trace.cut_step <= len(query_list)
            # exhaustive decode keeps the full order for ranking metrics
            assert len(trace.chosen) == len(query_list)

    def test_report_mean(self, tiny_model, small_dataset):
        result = run_pipeline(small_dataset, tiny_model, TruncationPolicy())
        values = [row.values["ndcg@5"] for row in result.report.rows]
        assert result.report.mean["ndcg@5"] == pytest.approx(
            math.fsum(values) / len(values)
        )

    @pytest.mark.parametrize("mode", ["rerank_only", "truncate_only", "fast"])
    def test_modes(self, tiny_model, small_dataset, mode):
        result = run_pipeline(
            small_dataset, tiny_model, TruncationPolicy(), mode
        )
        assert all(trace.mode == mode for trace in result.traces)
        if mode in ("rerank_only", "fast"):
            assert all(
                trace.cut_step == len(ql)
                for trace, ql in zip(result.traces, result.lists)
            )

    def test_model_policy_matches_plain_decode(self, tiny_model):
        query_list = make_list("q", [0, 3, 1, 2])
        exhaustive = decode_with_policy(
            query_list, tiny_model, TruncationPolicy()
        )
        plain = decode(query_list, tiny_model)
        assert exhaustive.cut_step == plain.cut_step
        assert exhaustive.output == plain.output

    def test_rejects_grades_without_gain(self, tiny_config):
        model = build_model(replace(tiny_config, gamma_map=GammaMap.binary()))
        dataset = Dataset(
            groups=(make_list("a", [0, 1, 3]),), feature_dim=3, grade_max=3
        )
        with pytest.raises(ConfigError, match=r"grades \[3\]"):
            run_pipeline(dataset, model, TruncationPolicy())


if __name__ == "__main__":
    pytest.main([__file__])
