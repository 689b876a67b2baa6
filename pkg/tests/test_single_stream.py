# tests/test_single_stream.py

import hashlib

import numpy as np
import pytest

from exceptions import ConfigValidationError, ContractError, DimensionError, DomainError
from single_stream import (
    EMPTY_SPAN,
    ConceptSpan,
    DenseDelta,
    GatedLoRA,
    ModelConfig,
    SingleStreamModel,
    UnifiedSequence,
    ZeroingPlan,
    attention_mass,
    permute_text,
    shuffle_tokens,
)
from tensor import Tensor, fd_gradient, max_rel_error, no_grad, slice_tokens

from conftest import random_lora


def _inputs(config, seed, batch=4):
    gen = np.random.default_rng(seed)
    x_t = gen.standard_normal((batch, config.n_I, config.d_data))
    t = gen.uniform(0.0, 1.0, batch)
    concepts = gen.integers(-1, config.n_concepts, batch)
    return x_t, [None if c < 0 else int(c) for c in concepts], t


class TestModelConfig:

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigValidationError):
            ModelConfig(d_model=10, n_heads=3)

    def test_concept_position_inside_template(self):
        with pytest.raises(ConfigValidationError):
            ModelConfig(n_T=2, concept_position=2)

    def test_hash_round_trip(self, tiny_config):
        again = ModelConfig.from_dict(tiny_config.to_dict())
        assert again.config_hash() == tiny_config.config_hash()
        assert ModelConfig().config_hash() != tiny_config.config_hash()


class TestEmbedding:

    def test_shapes_and_span(self, tiny_model, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = tiny_model.embed(x_t, 1, t)
        assert seq.H.shape == (4, tiny_config.seq_len, tiny_config.d_model)
        assert seq.concept_span == ConceptSpan(tiny_config.n_I + 1, tiny_config.n_I + 1)
        assert (seq.token_ids[:, tiny_config.concept_position] == 1).all()

    def test_unconditional_has_empty_span(self, tiny_model, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = tiny_model.embed(x_t, None, t)
        assert seq.concept_span.is_empty
        assert (seq.token_ids == -1).all()

    def test_two_dimensional_input_is_promoted(self, tiny_model, tiny_config):
        x = np.zeros((tiny_config.n_I, tiny_config.d_data))
        assert tiny_model.velocity(x, 0, 0.5).shape == (1, tiny_config.n_I, tiny_config.d_data)

    def test_mixed_batch_has_no_shared_span(self, tiny_model, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0, batch=3)
        seq = tiny_model.embed(x_t, [0, None, 0], t)
        assert seq.mixed_concepts
        np.testing.assert_array_equal(seq.concept_rows, [True, False, True])
        with pytest.raises(ContractError):
            seq.require_uniform_span()

    def test_uniform_batches_keep_their_span(self, tiny_model, tiny_config, rng):
        x_t, _, t = _inputs(tiny_config, 0, batch=3)
        conditioned = tiny_model.embed(x_t, [1, 0, 1], t)
        assert not conditioned.mixed_concepts
        assert conditioned.require_uniform_span() == conditioned.concept_span
        assert tiny_model.embed(x_t, None, t).require_uniform_span().is_empty
        mixed = tiny_model.embed(x_t, [1, None, 1], t)
        assert shuffle_tokens(mixed, rng).mixed_concepts

    def test_out_of_vocab_concept(self, tiny_model, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        with pytest.raises(DomainError):
            tiny_model.embed(x_t, tiny_config.vocab, t)

    def test_wrong_data_shape(self, tiny_model):
        with pytest.raises(DimensionError):
            tiny_model.embed(np.zeros((2, 5, 2)), 0, 0.5)

    def test_perturbed_alias_is_close_but_distinct(self, tiny_model):
        table = tiny_model.params["embed.tokens"].data
        for c in range(tiny_model.config.n_concepts):
            alias = table[tiny_model.perturbed_id(c)]
            assert not np.array_equal(alias, table[c])
            assert np.abs(alias - table[c]).max() < 0.5


class TestForward:

    def test_attention_rows_are_distributions(self, frozen, tiny_config):
        x_t, concepts, t = _inputs(tiny_config, 1)
        result = frozen.forward(frozen.embed(x_t, concepts, t))
        assert len(result.attn) == tiny_config.n_layers
        for rec in result.attn:
            np.testing.assert_allclose(rec.A.data.sum(axis=-1), 1.0, rtol=1e-12)
            assert rec.a_it.shape[-2:] == (tiny_config.n_I, tiny_config.n_T)

    def test_deterministic(self, frozen, tiny_config):
        x_t, concepts, t = _inputs(tiny_config, 2)
        a = frozen.velocity(x_t, concepts, t).data
        b = frozen.velocity(x_t, concepts, t).data
        assert np.array_equal(a, b)

    def test_zeroing_removes_span_columns(self, frozen, tiny_config):
        x_t, _, t = _inputs(tiny_config, 3)
        seq = frozen.embed(x_t, 0, t)
        plan = ZeroingPlan(span=seq.concept_span)
        result = frozen.forward(seq, zeroing=plan)
        for rec in result.attn:
            assert np.all(rec.A.data[..., seq.concept_span.start] == 0.0)
            np.testing.assert_allclose(rec.A.data.sum(axis=-1), 1.0, rtol=1e-12)

    def test_zeroing_restricted_to_layers(self, frozen, tiny_config):
        x_t, _, t = _inputs(tiny_config, 3)
        seq = frozen.embed(x_t, 0, t)
        result = frozen.forward(seq, zeroing=ZeroingPlan(span=seq.concept_span, layers=frozenset({1})))
        col = seq.concept_span.start
        assert np.any(result.attn[0].A.data[..., col] > 0.0)
        assert np.all(result.attn[1].A.data[..., col] == 0.0)

    def test_one_image_one_text_token_attention(self):
        config = ModelConfig(
            d_model=4, n_heads=1, n_layers=1, n_I=1, n_T=1, d_data=1,
            n_concepts=1, time_embed_dim=2, concept_position=0,
        )
        model = SingleStreamModel.init(config, seed=2)
        seq = model.embed(np.array([[[0.3]]]), 0, 0.4)
        with no_grad():
            rec = model.forward(seq).attn[0]

        h = seq.H.data[0]
        x = h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + config.rms_eps) * model.params["blocks.0.norm1"].data
        q = x @ model.params["blocks.0.w_q"].data
        k = x @ model.params["blocks.0.w_k"].data
        scores = q @ k.T / np.sqrt(config.d_k)
        direct = np.exp(scores - scores.max(axis=-1, keepdims=True))
        direct /= direct.sum(axis=-1, keepdims=True)

        assembled = np.block([[rec.a_ii[0, 0], rec.a_it[0, 0]], [rec.a_ti[0, 0], rec.a_tt[0, 0]]])
        assert assembled.shape == (2, 2)
        np.testing.assert_allclose(assembled, direct, rtol=0, atol=1e-12)

    def test_zeroing_all_text_equals_image_only(self, frozen, tiny_config, lora):
        x_t, _, t = _inputs(tiny_config, 4)
        n_I = tiny_config.n_I
        seq = frozen.embed(x_t, 0, t)
        plan = ZeroingPlan(span=ConceptSpan(n_I, tiny_config.seq_len - 1))
        image_only = UnifiedSequence(
            H=slice_tokens(seq.H, 0, n_I), n_I=n_I, concept_span=EMPTY_SPAN,
            token_ids=np.zeros((x_t.shape[0], 0), dtype=np.int64),
        )
        with no_grad():
            expected = frozen.forward(image_only).velocity.data
            zeroed = frozen.forward(seq, zeroing=plan).velocity.data
            adapted = frozen.forward(seq, lora, zeroing=plan).velocity.data
        np.testing.assert_allclose(zeroed, expected, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(adapted, expected, rtol=1e-10, atol=1e-12)


class TestStreamGating:

    def test_image_rows_bitwise_frozen(self, frozen, tiny_config):
        for seed in range(100):
            lora = random_lora(tiny_config, seed=seed)
            gen = np.random.default_rng(seed)
            x = Tensor(gen.standard_normal((2, tiny_config.seq_len, tiny_config.d_model)))
            layer = seed % tiny_config.n_layers
            for name in ("w_q", "w_k", "w_v"):
                plain = frozen.project(x, layer, name).data
                adapted = frozen.project(x, layer, name, lora).data
                n_I = tiny_config.n_I
                assert np.array_equal(adapted[:, :n_I], plain[:, :n_I])
                assert not np.array_equal(adapted[:, n_I:], plain[:, n_I:])

    def test_ungated_adapter_touches_image_rows(self, frozen, tiny_config):
        lora = random_lora(tiny_config, seed=0, gated=False)
        x = Tensor(np.random.default_rng(0).standard_normal((1, tiny_config.seq_len, tiny_config.d_model)))
        plain = frozen.project(x, 0, "w_q").data
        adapted = frozen.project(x, 0, "w_q", lora).data
        assert not np.array_equal(adapted[:, :tiny_config.n_I], plain[:, :tiny_config.n_I])

    def test_zero_down_factor_is_identity(self, frozen, tiny_config):
        for seed in range(10):
            lora = random_lora(tiny_config, seed=seed)
            for key, (down, up) in lora.factors.items():
                lora.factors[key] = (Tensor(np.zeros(down.shape), requires_grad=True), up)
            x_t, concepts, t = _inputs(tiny_config, seed)
            assert np.array_equal(frozen.velocity(x_t, concepts, t, lora).data, frozen.velocity(x_t, concepts, t).data)

    def test_fresh_lora_is_identity(self, frozen, tiny_config):
        lora = GatedLoRA.init(tiny_config, rank=3, seed=1)
        x_t, concepts, t = _inputs(tiny_config, 7)
        assert np.array_equal(frozen.velocity(x_t, concepts, t, lora).data, frozen.velocity(x_t, concepts, t).data)

    def test_dense_delta_matches_factors(self, frozen, tiny_config, lora):
        dense = DenseDelta({key: lora.effective_delta(key) for key in lora.factors})
        x_t, concepts, t = _inputs(tiny_config, 8)
        np.testing.assert_allclose(
            frozen.velocity(x_t, concepts, t, dense).data,
            frozen.velocity(x_t, concepts, t, lora).data,
            rtol=1e-12, atol=1e-12,
        )

    def test_lora_gradient_matches_finite_differences(self, frozen, tiny_config, lora):
        x_t, concepts, t = _inputs(tiny_config, 9, batch=2)
        cotangent = np.random.default_rng(9).standard_normal((2, tiny_config.n_I, tiny_config.d_data))
        down, _ = lora.factors["blocks.1.w_k"]

        def f(_):
            return (frozen.velocity(x_t, concepts, t, lora) * Tensor(cotangent)).sum()

        lora.zero_grad()
        f(down).backward()
        assert max_rel_error(down.grad, fd_gradient(f, down, 1e-5).data) < 1e-5


class TestAttentionMass:

    def test_empty_span_is_zero(self, frozen, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = frozen.embed(x_t, None, t)
        result = frozen.forward(seq)
        assert attention_mass(result.attn, seq.concept_span).item() == 0.0

    def test_mass_is_mean_of_block(self, frozen, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = frozen.embed(x_t, 0, t)
        result = frozen.forward(seq)
        col = seq.concept_span.start
        expected = np.mean([rec.A.data[..., :tiny_config.n_I, col].mean() for rec in result.attn])
        assert attention_mass(result.attn, seq.concept_span).item() == pytest.approx(expected, rel=1e-12)
        only_last = attention_mass(result.attn, seq.concept_span, layers=[1]).item()
        assert only_last == pytest.approx(result.attn[1].A.data[..., :tiny_config.n_I, col].mean(), rel=1e-12)

    def test_unknown_rows(self, frozen, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = frozen.embed(x_t, 0, t)
        with pytest.raises(ContractError):
            attention_mass(frozen.forward(seq).attn, seq.concept_span, rows="text")


class TestTokenOrder:

    def test_permutation_moves_span(self, frozen, tiny_config):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = frozen.embed(x_t, 0, t)
        moved = permute_text(seq, [1, 0, 2])
        assert moved.concept_span.start == tiny_config.n_I
        assert (moved.token_ids[:, 0] == 0).all()

    def test_invalid_order(self, frozen, tiny_config):
        seq = frozen.embed(*_inputs(tiny_config, 0)[0:1], 0, 0.5)
        with pytest.raises(ContractError):
            permute_text(seq, [0, 0, 1])

    def test_shuffle_keeps_concept_token(self, frozen, tiny_config, rng):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = frozen.embed(x_t, 1, t)
        for _ in range(10):
            shuffled = shuffle_tokens(seq, rng)
            assert (shuffled.token_ids[:, shuffled.concept_span.start - tiny_config.n_I] == 1).all()

    def test_hundred_shuffles_conserve_token_content(self, frozen, tiny_config, rng):
        x_t, _, t = _inputs(tiny_config, 0)
        seq = frozen.embed(x_t, 1, t)

        def content_checksum(s):
            rows = np.sort(s.text_content.data, axis=1)
            return hashlib.sha256(np.ascontiguousarray(rows).tobytes()).hexdigest()

        reference = content_checksum(seq)
        masses = set()
        with no_grad():
            for _ in range(100):
                shuffled = shuffle_tokens(seq, rng)
                assert content_checksum(shuffled) == reference
                assert np.array_equal(np.sort(shuffled.token_ids, axis=1), np.sort(seq.token_ids, axis=1))
                mass = attention_mass(frozen.forward(shuffled).attn, shuffled.concept_span).item()
                masses.add(round(mass, 12))
        assert len(masses) > 1

    def test_shuffle_without_rng_is_identity(self, frozen, tiny_config):
        seq = frozen.embed(_inputs(tiny_config, 0)[0], 1, 0.5)
        assert shuffle_tokens(seq, None) is seq


class TestParameters:

    def test_frozen_copy_has_no_gradients(self, tiny_model):
        frozen = tiny_model.frozen()
        assert all(not p.requires_grad for p in frozen.parameters())
        assert frozen.checksum() == tiny_model.checksum()

    def test_lora_keys_cover_qkv(self, tiny_config):
        keys = GatedLoRA.keys(tiny_config)
        assert len(keys) == 3 * tiny_config.n_layers
        assert "blocks.0.w_v" in keys

    def test_lora_rank_validated(self, tiny_config):
        with pytest.raises(ConfigValidationError):
            GatedLoRA.init(tiny_config, rank=0)

    def test_same_seed_same_model(self, tiny_config):
        a = SingleStreamModel.init(tiny_config, seed=11)
        b = SingleStreamModel.init(tiny_config, seed=11)
        assert a.checksum() == b.checksum()
