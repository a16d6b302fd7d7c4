#!/usr/bin/env python3
"""
Tests for the encoder, the step-wise decoder and the model wrapper.
"""

import math
import random
from dataclasses import replace

import pytest
import torch

from src.core.decoder import (
    MASKED_SCORE,
    backward_window,
    decode,
    dynamic_rank,
    generate,
    relative_position_bucket,
)
from src.core.encoder import OUTPUT_INIT_SCALE, embed_inputs
from src.core.model import (
    CROSS_RANKING_FFN,
    RERANK_PHASE,
    TRUNCATE_PHASE,
    TRUNCATION_MODULE,
    build_model,
    phase_mask,
)
from src.core.types import (
    DecodeExhaustedError,
    FeatureDoc,
    QueryList,
    ValidationError,
)
from tests.conftest import make_list


def random_list(rng: random.Random, qid: str, feature_dim: int = 3):
    n = rng.randint(1, 8)
    docs = tuple(
        FeatureDoc(
            doc_id=f"{qid}-{i}",
            features=tuple(rng.gauss(0, 1) for _ in range(feature_dim)),
            label=rng.randint(0, 4),
            initial_score=rng.gauss(0, 1),
        )
        for i in range(n)
    )
    return QueryList(qid=qid, docs=docs)


def force_cut(model, cut: bool) -> None:
    """Pin the truncation head to always (or never) cut."""
    with torch.no_grad():
        model.decoder.truncation.head.weight.zero_()
        bias = [-20.0, 20.0] if cut else [20.0, -20.0]
        model.decoder.truncation.head.bias.copy_(torch.tensor(bias))


class TestRelativePositions:
    """Test the bidirectional relative-position buckets."""

    def test_bucket_values(self):
        offsets = torch.tensor([0, 1, 3, -1, -3, -1000, 1000])
        buckets = relative_position_bucket(offsets, 16, 64)
        assert buckets.tolist() == [0, 9, 11, 1, 3, 7, 15]

    def test_buckets_monotone_in_distance(self):
        offsets = torch.arange(0, 200)
        forward = relative_position_bucket(offsets, 16, 64).tolist()
        backward = relative_position_bucket(-offsets, 16, 64).tolist()
        assert forward[1:] == sorted(forward[1:])
        assert backward == sorted(backward)
        assert max(forward) < 16 and min(backward) >= 0

    def test_bias_shape(self, tiny_model):
        bias = tiny_model.decoder.truncation.rel_pos_table(5)
        assert bias.shape == (2, 5, 5)

    def test_bias_depends_only_on_offsets(self, tiny_model):
        bias = tiny_model.decoder.truncation.rel_pos_table
        with torch.no_grad():
            bias.table.weight.copy_(
                torch.arange(16, dtype=torch.float64).view(8, 2)
            )
        expected = bias(6)
        for shift in (3, 40):
            positions = torch.arange(6) + shift
            buckets = relative_position_bucket(
                positions[:, None] - positions[None, :],
                bias.num_buckets,
                bias.max_distance,
            )
            assert torch.equal(bias.table(buckets).permute(2, 0, 1), expected)


class TestEncoder:
    """Test input embeddings and the global dependency encoder."""

    def test_embedding_rows(self, tiny_model):
        query_list = make_list("q", [0, 1, 2], scores=[3.0, 2.0, 1.0])
        u = tiny_model.embed(query_list)
        assert u.shape == (3, 4)
        assert u[:, -1].tolist() == [3.0, 2.0, 1.0]
        assert u.dtype == torch.float64

    def test_encoder_shapes(self, tiny_model):
        u = tiny_model.embed(make_list("q", [0, 1, 2, 3]))
        out = tiny_model.encoder(u)
        assert out.X.shape == (4, 8)
        assert out.O.shape == (4, 8)

    def test_encoder_is_permutation_equivariant(self, tiny_model):
        u = tiny_model.embed(make_list("q", [0, 1, 2, 3]))
        order = torch.tensor([2, 0, 3, 1])
        plain = tiny_model.encoder(u).O
        permuted = tiny_model.encoder(u[order]).O
        assert torch.allclose(plain[order], permuted, atol=1e-12)

    def test_output_projection_init(self, tiny_model):
        bound = OUTPUT_INIT_SCALE / math.sqrt(8)
        out = tiny_model.encoder.blocks[0].attention.out
        assert out.weight.abs().max() <= bound * (1 + 1e-6)
        assert torch.count_nonzero(out.bias) == 0

    def test_non_finite_input_rejected(self):
        docs = (
            FeatureDoc("a", (1.0, float("nan")), 0, 1.0),
            FeatureDoc("b", (1.0, 2.0), 0, 0.0),
        )
        with pytest.raises(ValidationError, match="q9.*row 0"):
            embed_inputs(QueryList("q9", docs))

    def test_embedding_hook(self, tiny_config):
        def hook(query_list):
            return [[float(i)] * 4 for i in range(len(query_list))]

        model = build_model(tiny_config, embedding_hook=hook)
        u = model.embed(make_list("q", [0, 1]))
        assert u.tolist() == [[0.0] * 4, [1.0] * 4]

    def test_embedding_hook_shape_checked(self, tiny_config):
        model = build_model(tiny_config, embedding_hook=lambda ql: [[0.0]])
        with pytest.raises(ValidationError, match="embedding hook"):
            model.embed(make_list("q", [0, 1]))

    def test_residual_stream_dominates_at_init(self, tiny_model):
        u = tiny_model.embed(make_list("q", [0, 1, 2, 3, 4]))
        out = tiny_model.encoder(u)
        ratio = torch.linalg.norm(out.O - out.X) / torch.linalg.norm(out.X)
        assert float(ratio) < 0.1

    def test_embedding_hook_width_checked(self, tiny_config):
        model = build_model(
            tiny_config, embedding_hook=lambda ql: [[0.0] * 5] * len(ql)
        )
        with pytest.raises(ValidationError, match="q7.*width 5.*expects 4"):
            model.embed(make_list("q7", [0, 1]))


class TestDecoderLayers:
    """Test the latent cross, the cross ranking FFN and prefix attention."""

    def _inputs(self, model, n=3):
        query_list = make_list(
            "q", list(range(n)), feature_dim=model.config.feature_dim
        )
        u = model.embed(query_list)
        return u, model.encoder(u).O

    def test_latent_cross_identity(self, tiny_model):
        decoder = tiny_model.decoder
        u, o = self._inputs(tiny_model)
        with torch.no_grad():
            decoder.latent_cross_mlp.weight.zero_()
            decoder.latent_cross_mlp.bias.zero_()
        assert torch.equal(decoder.latent_cross(u, o), decoder.ffn_swish(u))

    def test_latent_cross_annihilator(self, tiny_model):
        decoder = tiny_model.decoder
        u, o = self._inputs(tiny_model)
        with torch.no_grad():
            decoder.ffn_swish.linear.weight.zero_()
            decoder.ffn_swish.linear.bias.zero_()
        assert torch.count_nonzero(decoder.latent_cross(u, o)) == 0

    def test_latent_cross_scaling(self, tiny_model):
        decoder = tiny_model.decoder
        u, o = self._inputs(tiny_model)
        with torch.no_grad():
            decoder.latent_cross_mlp.weight.zero_()
            decoder.latent_cross_mlp.bias.fill_(2.0)
        assert torch.allclose(
            decoder.latent_cross(u, o), 3.0 * decoder.ffn_swish(u)
        )

    def test_score_candidates_dense_arithmetic(self, tiny_config):
        config = replace(
            tiny_config, feature_dim=2, attention_dim=4, rffn_hidden=3
        )
        model = build_model(config)
        decoder = model.decoder
        u, o = self._inputs(model)
        cross = decoder.latent_cross(u, o)
        m = decoder.sequential_dependency(u[:1], model.encoder.transfer)
        mask = torch.tensor([True, False, False])
        scores = decoder.score_candidates(cross, m, mask)

        first, _, second = decoder.rffn
        w1, b1 = first.weight.detach(), first.bias.detach()
        w2, b2 = second.weight.detach(), second.bias.detach()
        expected = []
        for row in cross.detach():
            hidden = w1 @ torch.cat([row, m.detach()]) + b1
            hidden = hidden * torch.sigmoid(hidden)
            expected.append(float(w2[0] @ hidden + b2[0]))

        assert scores.shape == (3,)
        assert float(scores[0]) == MASKED_SCORE
        assert scores[1:].tolist() == pytest.approx(expected[1:], abs=1e-12)

    def test_step_state_depends_only_on_prefix(self, tiny_model):
        decoder = tiny_model.decoder
        transfer = tiny_model.encoder.transfer
        u = tiny_model.embed(make_list("q", [0, 1, 2, 3, 4]))
        prefix = [2, 0]
        m = decoder.sequential_dependency(u[prefix], transfer)

        other = u.clone()
        other[3:] = other[3:] * -2.0 + 1.0
        same = decoder.sequential_dependency(other[prefix], transfer)
        assert torch.equal(m, same)

        changed = u.clone()
        changed[0] += 0.5
        moved = decoder.sequential_dependency(changed[prefix], transfer)
        assert not torch.allclose(m, moved)

    def test_empty_prefix_uses_start_vector(self, tiny_model):
        decoder = tiny_model.decoder
        transfer = tiny_model.encoder.transfer
        u = tiny_model.embed(make_list("q", [0, 1]))
        m = decoder.sequential_dependency(u[:0], transfer)
        start = transfer(decoder.start_vector.unsqueeze(0))[0]
        assert torch.equal(m, start)


class TestDecoderHelpers:
    """Test ranking helpers used at every decode step."""

    def test_dynamic_rank_orders_unselected(self):
        scores = torch.tensor([0.5, 2.0, 0.5, MASKED_SCORE])
        mask = torch.tensor([False, False, False, True])
        assert dynamic_rank(scores, mask) == [1, 0, 2]

    def test_dynamic_rank_exhausted(self):
        with pytest.raises(DecodeExhaustedError):
            dynamic_rank(torch.zeros(2), torch.ones(2, dtype=torch.bool))

    def test_backward_window_clipped(self):
        assert backward_window([3, 1, 2], beta=4) == [1, 2]
        assert backward_window([3, 1, 2], beta=1) == [1]
        assert backward_window([3], beta=2) == []


class TestDecode:
    """Test greedy decoding in every mode."""

    def test_rerank_only_is_full_permutation(self, tiny_model):
        query_list = make_list("q", [0, 2, 1, 4, 3])
        trace = decode(query_list, tiny_model, "rerank_only")
        assert sorted(trace.chosen) == [0, 1, 2, 3, 4]
        assert trace.cut_step == 5
        assert len(trace.cut_probs) == 5

    def test_selected_candidates_are_masked(self, tiny_model):
        query_list = make_list("q", [0, 1, 2, 3])
        trace = decode(query_list, tiny_model, "rerank_only")
        for step, scores in enumerate(trace.score_matrices, start=1):
            for index in trace.chosen[: step - 1]:
                assert scores[index] == MASKED_SCORE
            assert max(scores) == scores[trace.chosen[step - 1]]

    def test_forced_cut_keeps_first_document(self, tiny_model):
        force_cut(tiny_model, cut=True)
        trace = decode(make_list("q", [1, 0, 2]), tiny_model, "full")
        assert trace.cut_step == 1
        assert len(trace.chosen) == 1
        assert trace.output_doc_ids == (trace.doc_ids[0],)

    def test_no_cut_returns_whole_list(self, tiny_model):
        force_cut(tiny_model, cut=False)
        trace = decode(make_list("q", [1, 0, 2]), tiny_model, "full")
        assert trace.cut_step == 3
        assert len(trace.output) == 3

    def test_exhaustive_continues_after_cut(self, tiny_model):
        force_cut(tiny_model, cut=True)
        trace = decode(
            make_list("q", [1, 0, 2]), tiny_model, "full", exhaustive=True
        )
        assert trace.cut_step == 1
        assert len(trace.chosen) == 3

    def test_cut_respects_threshold(self, tiny_model):
        trace = decode(make_list("q", [0, 1, 2, 3, 4, 0]), tiny_model)
        threshold = tiny_model.config.cut_threshold
        p_cut = trace.p_cut
        assert len(p_cut) == trace.cut_step
        assert all(p <= threshold for p in p_cut[:-1])
        if trace.cut_step < 6:
            assert p_cut[-1] > threshold

    def test_truncate_only_keeps_input_order(self, tiny_model):
        force_cut(tiny_model, cut=False)
        query_list = make_list("q", [0, 1, 2, 3], scores=[4, 3, 2, 1])
        trace = decode(query_list, tiny_model, "truncate_only")
        assert trace.chosen == (0, 1, 2, 3)
        assert trace.doc_ids == tuple(query_list.doc_ids)

    def test_fast_mode_single_step(self, tiny_model):
        trace = decode(make_list("q", [0, 1, 2, 3]), tiny_model, "fast")
        assert len(trace.score_matrices) == 1
        assert trace.cut_probs == ()
        assert trace.cut_step == 4
        scores = trace.score_matrices[0]
        assert list(trace.chosen) == sorted(
            range(4), key=lambda i: (-scores[i], i)
        )

    def test_single_document(self, tiny_model):
        trace = decode(make_list("q", [3]), tiny_model)
        assert trace.chosen == (0,)
        assert trace.cut_step == 1

    def test_fast_matches_full_without_prefix_input(self, tiny_model):
        width = tiny_model.config.attention_dim
        with torch.no_grad():
            tiny_model.decoder.rffn[0].weight[:, width:] = 0.0
        force_cut(tiny_model, cut=False)
        rng = random.Random(11)
        for k in range(10):
            query_list = random_list(rng, f"q{k}")
            fast = decode(query_list, tiny_model, mode="fast")
            full = decode(query_list, tiny_model, mode="full")
            assert full.chosen == fast.chosen

    def test_large_inputs_stay_finite(self, tiny_model):
        docs = tuple(
            FeatureDoc(f"d{i}", (sign * 1e3,) * 3, i % 3, -sign * 1e3)
            for i, sign in enumerate([1.0, -1.0, 1.0, -1.0, 1.0])
        )
        generation = generate(
            tiny_model, QueryList("big", docs), mode="full", exhaustive=True
        )
        assert sorted(generation.chosen) == list(range(5))
        for scores in generation.scores:
            assert bool(torch.isfinite(scores).all())
        for probs in generation.cut_probs:
            assert bool(torch.isfinite(probs).all())
            assert float(probs.sum()) == pytest.approx(1.0)

    def test_unknown_mode(self, tiny_model):
        with pytest.raises(ValidationError, match="decode mode"):
            decode(make_list("q", [0, 1]), tiny_model, "beam")

    def test_long_list_capped(self, tiny_config):
        model = build_model(replace(tiny_config, max_list_len=4))
        trace = decode(make_list("q", [0] * 9), model, "rerank_only")
        assert trace.num_candidates == 4

    def test_permutation_invariance(self, tiny_model):
        rng = random.Random(7)
        for q in range(100):
            query_list = random_list(rng, f"q{q}")
            shuffled = list(query_list.docs)
            rng.shuffle(shuffled)
            first = decode(query_list, tiny_model)
            shuffled_list = QueryList(query_list.qid, tuple(shuffled))
            second = decode(shuffled_list, tiny_model)
            assert first.doc_ids == second.doc_ids
            assert first.cut_step == second.cut_step

    def test_generation_gradients_reach_encoder(self, tiny_model):
        generation = generate(tiny_model, make_list("q", [0, 1, 2]), "full")
        generation.scores[0][generation.chosen[0]].backward()
        grad = tiny_model.encoder.transfer.linear.weight.grad
        assert grad is not None and torch.count_nonzero(grad) > 0


class TestStructuralInvariants:
    """Random decodes never violate the trace invariants."""

    def _check(self, model, count, seed):
        rng = random.Random(seed)
        for q in range(count):
            query_list = random_list(rng, f"q{q}")
            n = len(query_list)
            for mode in ("full", "truncate_only"):
                trace = decode(query_list, model, mode)
                assert len(set(trace.chosen)) == len(trace.chosen)
                assert 1 <= len(trace.output) <= n
                for p_0, p_1 in trace.cut_probs:
                    assert abs(p_0 + p_1 - 1.0) <= 1e-6

    def test_two_hundred_queries(self, tiny_model):
        self._check(tiny_model, 200, seed=11)

    @pytest.mark.slow
    def test_ten_thousand_queries(self, tiny_model):
        self._check(tiny_model, 10_000, seed=12)


class TestModel:
    """Test model construction and phase masks."""

    def test_build_is_seeded(self, tiny_config):
        first = build_model(tiny_config).state_dict()
        second = build_model(tiny_config).state_dict()
        other = build_model(replace(tiny_config, seed=1)).state_dict()
        assert all(torch.equal(first[k], second[k]) for k in first)
        assert not all(torch.equal(first[k], other[k]) for k in first)

    def test_build_leaves_global_rng(self, tiny_config):
        torch.manual_seed(123)
        expected = torch.rand(1)
        torch.manual_seed(123)
        build_model(tiny_config)
        assert torch.equal(torch.rand(1), expected)

    def test_parameter_groups_exist(self, tiny_model):
        names = [name for name, _ in tiny_model.named_parameters()]
        assert any(n.startswith(TRUNCATION_MODULE) for n in names)
        assert any(n.startswith(CROSS_RANKING_FFN) for n in names)

    def test_phase_masks(self):
        rerank = phase_mask(RERANK_PHASE)
        truncate = phase_mask(TRUNCATE_PHASE)
        assert rerank.is_frozen("decoder.truncation.head.weight")
        assert not rerank.is_frozen("decoder.rffn.0.weight")
        assert truncate.is_frozen("decoder.rffn.2.bias")
        assert not truncate.is_frozen("encoder.transfer.linear.weight")


if __name__ == "__main__":
    pytest.main([__file__])
