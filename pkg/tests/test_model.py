"""End-to-end model behavior: variant equivalences, loss/perplexity, the
parameter census, weight tying, serialization, and trainability."""

import math

import numpy as np
import pytest

from conftest import desk_config
from streamssm.checkpoint import load_checkpoint, params_to_tensors, save_checkpoint
from streamssm.errors import ConfigError, DataError, NumericError
from streamssm.model import (Model, ModelConfig, build_params,
                             expected_param_count, model_forward,
                             parameter_census, perplexity, sequence_loss,
                             total_parameters)
from streamssm.tensor import Tensor
from streamssm.trainer import TrainConfig, init_optimizer, optimizer_step


def tokens_for(cfg, rng, bsz=2):
    return rng.integers(0, cfg.vocab_size, size=(bsz, cfg.seq_len))


def copy_shared_params(src: dict, dst: dict) -> None:
    """Copy every parameter present in both dicts, bitwise."""
    for name, tensor in dst.items():
        if name in src:
            tensor.data[...] = src[name].data


class TestConfigValidation:
    def test_baseline_rejects_multiple_streams(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="baseline", streams=3).validate()

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="transformer").validate()

    def test_round_trip_dict(self):
        cfg = desk_config("mhc_adapters")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestForwardShapesAndErrors:
    def test_logit_shape(self, rng):
        for variant in ("baseline", "mhc_static", "mhc_adapters"):
            cfg = desk_config(variant)
            m = Model(cfg)
            logits = m.forward(tokens_for(cfg, rng))
            assert logits.shape == (2, cfg.seq_len, cfg.vocab_size)

    def test_out_of_range_token(self, rng):
        cfg = desk_config("baseline")
        m = Model(cfg)
        bad = tokens_for(cfg, rng)
        bad[0, 0] = cfg.vocab_size
        with pytest.raises(DataError):
            m.forward(bad)

    def test_too_long_sequence(self, rng):
        cfg = desk_config("baseline")
        m = Model(cfg)
        with pytest.raises(DataError):
            m.forward(rng.integers(0, cfg.vocab_size, size=(1, cfg.seq_len + 1)))

    def test_nan_activations_name_the_layer(self, rng):
        cfg = desk_config("baseline")
        m = Model(cfg)
        m.params["layers.1.block.out_proj.bias"].data[0] = np.nan
        with pytest.raises(NumericError, match="layer 1"):
            m.forward(tokens_for(cfg, rng))

    def test_short_sequences_use_leading_positions(self, rng):
        cfg = desk_config("baseline")
        m = Model(cfg)
        short = rng.integers(0, cfg.vocab_size, size=(2, 3))
        assert m.forward(short).shape == (2, 3, cfg.vocab_size)

    def test_model_level_causality(self, rng):
        cfg = desk_config("mhc_static")
        m = Model(cfg)
        x = tokens_for(cfg, rng, bsz=1)
        base = m.forward(x).data
        bumped = x.copy()
        bumped[0, 3] = (bumped[0, 3] + 1) % cfg.vocab_size
        out = m.forward(bumped).data
        np.testing.assert_array_equal(out[:, :3], base[:, :3])
        assert np.abs(out[:, 3:] - base[:, 3:]).max() > 0


class TestVariantEquivalences:
    def test_empty_stack_multi_stream_equals_baseline_bitwise(self, rng):
        # L = 0 with exact replicate expansion and uniform aggregation over
        # two streams reduces to norm+head of the embedding, bit for bit.
        base_cfg = desk_config("baseline", layers=0)
        mhc_cfg = desk_config("mhc_static", layers=0, streams=2)
        base = Model(base_cfg)
        mhc = Model(mhc_cfg)
        copy_shared_params(base.params, mhc.params)
        d, n = mhc_cfg.dim, mhc_cfg.streams
        mhc.params["expander.weight"].data[...] = np.tile(np.eye(d), (1, n))
        mhc.params["expander.bias"].data[...] = 0.0
        x = tokens_for(base_cfg, rng)
        np.testing.assert_array_equal(mhc.forward(x).data, base.forward(x).data)

    def test_single_stream_mhc_matches_baseline(self, rng):
        base_cfg = desk_config("baseline")
        mhc_cfg = desk_config("mhc_static", streams=1)
        base = Model(base_cfg)
        mhc = Model(mhc_cfg)
        copy_shared_params(base.params, mhc.params)
        mhc.params["expander.weight"].data[...] = np.eye(mhc_cfg.dim)
        mhc.params["expander.bias"].data[...] = 0.0
        x = tokens_for(base_cfg, rng)
        diff = np.abs(mhc.forward(x).data - base.forward(x).data).max()
        assert diff <= 1e-5

    def test_adapter_variant_matches_static_at_init_bitwise(self, rng):
        static_cfg = desk_config("mhc_static")
        adapter_cfg = desk_config("mhc_adapters")
        static = Model(static_cfg)
        adapters = Model(adapter_cfg)
        copy_shared_params(static.params, adapters.params)
        x = tokens_for(static_cfg, rng)
        np.testing.assert_array_equal(adapters.forward(x).data, static.forward(x).data)


class TestLossAndPerplexity:
    def test_uniform_logits_give_log_vocab(self):
        loss = sequence_loss(Tensor(np.zeros((2, 3, 7))), np.zeros((2, 3), dtype=int))
        assert abs(float(loss.data) - math.log(7)) <= 1e-12

    def test_confident_logits_near_zero_loss(self, rng):
        targets = rng.integers(0, 5, size=(2, 3))
        logits = np.zeros((2, 3, 5))
        for b in range(2):
            for t in range(3):
                logits[b, t, targets[b, t]] = 100.0
        loss = sequence_loss(Tensor(logits), targets)
        assert float(loss.data) <= 1e-6

    def test_matches_softmax_oracle(self, rng):
        logits = rng.normal(size=(2, 2, 5))
        targets = rng.integers(0, 5, size=(2, 2))
        p = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        expected = -np.log(p[np.arange(2)[:, None], np.arange(2)[None, :], targets]).mean()
        assert abs(float(sequence_loss(Tensor(logits), targets).data) - expected) <= 1e-6

    def test_out_of_range_target(self):
        with pytest.raises(DataError):
            sequence_loss(Tensor(np.zeros((1, 2, 4))), np.array([[0, 4]]))

    def test_perplexity_fixture_values(self):
        # loss -> ppl mapping pinned for the three reference rows
        for loss, ppl in ((6.3507, 572.91), (6.2448, 515.35), (6.1353, 461.88)):
            assert abs(perplexity(loss) - ppl) / ppl <= 1e-4
        assert perplexity(0.0) == 1.0

    def test_perplexity_rejects_nonfinite(self):
        with pytest.raises(NumericError):
            perplexity(float("nan"))


class TestParameterCensus:
    @pytest.mark.parametrize("variant", ["baseline", "mhc_static", "mhc_adapters"])
    def test_census_matches_closed_form(self, variant):
        cfg = desk_config(variant)
        params = build_params(cfg)
        rows = parameter_census(params)
        assert sum(count for _, _, count in rows) == expected_param_count(cfg)
        assert total_parameters(params) == expected_param_count(cfg)

    def test_census_is_deterministic(self):
        cfg = desk_config("mhc_adapters")
        a = parameter_census(build_params(cfg))
        b = parameter_census(build_params(cfg))
        assert a == b

    def test_variant_increments(self):
        base = desk_config("baseline")
        static = desk_config("mhc_static")
        adapters = desk_config("mhc_adapters")
        d, n, layers = static.dim, static.streams, static.layers
        static_extra = d * n * d + n * d + layers * (2 * n + n * n) + n
        assert expected_param_count(static) - expected_param_count(base) == static_extra
        r = adapters.adapter_rank
        per_layer = 2 * (d * r + r * d + n * r) + 2 * d
        assert (expected_param_count(adapters) - expected_param_count(static)
                == layers * per_layer)

    def test_tied_head_adds_no_parameters(self):
        cfg = desk_config("baseline")
        names = [name for name, _, _ in parameter_census(build_params(cfg))]
        assert "embed.weight" in names
        assert not any("head" in name for name in names)


class TestTiedHead:
    def test_mutating_embedding_changes_head_output(self, rng):
        cfg = desk_config("baseline", layers=0)
        m = Model(cfg)
        x = tokens_for(cfg, rng)
        before = m.forward(x).data.copy()
        m.params["embed.weight"].data[...] += 0.1
        after = m.forward(x).data
        assert np.abs(after - before).max() > 0

    def test_gradient_accumulates_from_both_uses(self, rng):
        cfg = desk_config("baseline", layers=0)
        m = Model(cfg)
        x = tokens_for(cfg, rng)
        loss = m.loss(x, x)
        loss.backward()
        grad = m.params["embed.weight"].grad
        assert grad is not None and np.abs(grad).max() > 0


class TestSerialization:
    def test_round_trip_forward_is_bit_identical(self, rng, tmp_path):
        cfg = desk_config("mhc_adapters", dtype="float32")
        m = Model(cfg)
        x = tokens_for(cfg, rng)
        before = m.forward(x).data.copy()
        path = tmp_path / "model.ssmckpt"
        save_checkpoint(path, cfg, m.params, rng_state=m.rng_state())
        bundle = load_checkpoint(path)
        m2 = Model(bundle.config, params=params_to_tensors(bundle.params))
        np.testing.assert_array_equal(m2.forward(x).data, before)
        for name, tensor in m.params.items():
            assert bundle.params[name].tobytes() == tensor.data.tobytes()

    def test_optimizer_and_rng_round_trip(self, rng, tmp_path):
        cfg = desk_config("baseline", dtype="float32")
        m = Model(cfg)
        opt = init_optimizer(m.params)
        opt.m["embed.weight"][0, 0] = 0.5
        opt.step = 17
        path = tmp_path / "full.ssmckpt"
        save_checkpoint(path, cfg, m.params, opt_state=opt.to_dict(),
                        rng_state=m.rng_state())
        bundle = load_checkpoint(path)
        assert bundle.opt_state["step"] == 17
        assert bundle.opt_state["m"]["embed.weight"][0, 0] == np.float32(0.5)
        assert bundle.rng_state == m.rng_state()


class TestTrainability:
    def test_one_step_decreases_loss_for_most_seeds(self, rng):
        # one AdamW step on a fixed batch at lr 1e-3, ten seeds per variant
        tc = TrainConfig(lr=1e-3, weight_decay=0.0, clip_norm=1e9, epochs=1)
        for variant in ("baseline", "mhc_static", "mhc_adapters"):
            wins = 0
            for seed in range(10):
                cfg = desk_config(variant, seed=seed, dtype="float64")
                m = Model(cfg)
                x = tokens_for(cfg, np.random.default_rng(seed))
                before = float(m.loss(x, x).data)
                opt = init_optimizer(m.params)
                optimizer_step(m, x, x, tc, opt)
                after = float(m.loss(x, x).data)
                wins += after < before
            assert wins >= 9, f"{variant}: only {wins}/10 seeds improved"

    def test_dropout_draws_are_reproducible_from_rng_state(self, rng):
        cfg = desk_config("baseline", dropout=0.3, dtype="float32")
        m = Model(cfg)
        x = tokens_for(cfg, rng)
        state = m.rng_state()
        a = m.forward(x, training=True).data.copy()
        m.set_rng_state(state)
        b = m.forward(x, training=True).data
        np.testing.assert_array_equal(a, b)
