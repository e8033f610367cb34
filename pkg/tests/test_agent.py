"""Policy network and checkpoint serialization tests."""

import numpy as np
import pytest

from protolab.agent import (ACTIVATIONS, CHECKPOINT_MAGIC, AgentConfig,
                            MentalState, act, act_batch, checkpoint_bytes,
                            first_layer_output, init_params, initial_state,
                            load_checkpoint, load_checkpoint_bytes,
                            save_checkpoint, zero_params)
from protolab.errors import CheckpointError, ConfigurationError


def config(**kw):
    base = dict(vocab=5, n_classes=3, obs_bits=2, dense_units=16,
                lstm_units=8, activation="relu")
    base.update(kw)
    return AgentConfig(**base)


def empty_inputs(cfg):
    own = np.zeros(cfg.vocab, dtype=np.float32)
    other = np.zeros(cfg.vocab, dtype=np.float32)
    obs = np.zeros(cfg.obs_bits, dtype=np.float32)
    return own, other, obs


class TestConfig:
    def test_input_output_widths(self):
        cfg = config()
        assert cfg.input_width == 5 + 5 + 2 == 12
        assert cfg.output_width == 3 + 5 == 8

    def test_default_sizes_match_contract(self):
        cfg = AgentConfig(vocab=5, n_classes=3, obs_bits=2)
        assert cfg.dense_units == 128
        assert cfg.lstm_units == 64

    def test_bad_activation_rejected(self):
        with pytest.raises(ConfigurationError):
            config(activation="gelu").validate()

    def test_bad_sizes_rejected(self):
        with pytest.raises(ConfigurationError):
            config(vocab=0).validate()
        with pytest.raises(ConfigurationError):
            config(lstm_units=0).validate()


class TestForward:
    def test_zero_params_give_uniform_prediction_and_zero_utterance(self):
        cfg = config()
        params = zero_params(cfg)
        state = initial_state(cfg)
        action, _ = act(params, state, *empty_inputs(cfg))
        np.testing.assert_allclose(action.prediction, 1.0 / 3.0, atol=1e-7)
        np.testing.assert_allclose(action.utterance, 0.0, atol=1e-7)

    def test_prediction_is_distribution(self):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(0))
        state = initial_state(cfg)
        action, _ = act(params, state, *empty_inputs(cfg))
        assert action.prediction.sum() == pytest.approx(1.0, abs=1e-6)
        assert (action.prediction >= 0).all()
        assert action.utterance.shape == (5,)

    def test_deterministic(self):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(1))
        a1, s1 = act(params, initial_state(cfg), *empty_inputs(cfg))
        a2, s2 = act(params, initial_state(cfg), *empty_inputs(cfg))
        np.testing.assert_array_equal(a1.utterance, a2.utterance)
        np.testing.assert_array_equal(s1.h, s2.h)

    def test_state_carries_information(self):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(2))
        own, other, obs = empty_inputs(cfg)
        other_hot = np.eye(5, dtype=np.float32)[3]
        _, state_a = act(params, initial_state(cfg), own, other_hot, obs)
        _, state_b = act(params, initial_state(cfg), own, other, obs)
        # different messages must leave different mental states
        assert np.abs(state_a.h - state_b.h).max() > 1e-6
        # and influence the next action
        act_a, _ = act(params, state_a, own, other, obs)
        act_b, _ = act(params, state_b, own, other, obs)
        assert np.abs(act_a.prediction - act_b.prediction).max() > 1e-9

    def test_batch_matches_scalar(self):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        own = rng.random((6, 5)).astype(np.float32)
        other = rng.random((6, 5)).astype(np.float32)
        obs = rng.random((6, 2)).astype(np.float32)
        h = np.zeros((6, cfg.lstm_units), dtype=np.float32)
        c = np.zeros((6, cfg.lstm_units), dtype=np.float32)
        utt, pred, h2, c2 = act_batch(params, h, c, own, other, obs)
        for i in range(6):
            action, state = act(params, initial_state(cfg), own[i], other[i],
                                obs[i])
            np.testing.assert_allclose(action.utterance, utt[i], atol=1e-5)
            np.testing.assert_allclose(action.prediction, pred[i], atol=1e-5)
            np.testing.assert_allclose(state.h, h2[i], atol=1e-5)

    def test_first_layer_affine_when_linear(self):
        # With the linear activation toggle the first layer must satisfy
        # f(a) + f(b) = f(a+b) + f(0) exactly (affinity), which the relu
        # variant must violate for mixed-sign inputs.
        cfg = config(activation="linear")
        params = init_params(cfg, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        a = rng.standard_normal((1, cfg.input_width)).astype(np.float32)
        b = rng.standard_normal((1, cfg.input_width)).astype(np.float32)
        zero = np.zeros_like(a)
        f = lambda x: first_layer_output(params, x)
        np.testing.assert_allclose(f(a) + f(b), f(a + b) + f(zero), atol=1e-5)

        relu_params = init_params(config(activation="relu"),
                                  np.random.default_rng(5))
        g = lambda x: first_layer_output(relu_params, x)
        assert np.abs((g(a) + g(b)) - (g(a + b) + g(zero))).max() > 1e-3

    def test_forget_gate_bias_initialized_open(self):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(7))
        u = cfg.lstm_units
        np.testing.assert_array_equal(params.b_gates[u:2 * u], 1.0)
        np.testing.assert_array_equal(params.b_gates[:u], 0.0)

    def test_glorot_bounds(self):
        cfg = config(dense_units=64, lstm_units=32)
        params = init_params(cfg, np.random.default_rng(8))
        limit = np.sqrt(6.0 / (cfg.input_width + cfg.dense_units))
        assert np.abs(params.w_in).max() <= limit
        assert np.abs(params.w_in).max() > limit * 0.8


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(9))
        path = tmp_path / "agent.ckpt"
        save_checkpoint(params, path, metadata={"seed": 9, "note": "x"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"seed": 9, "note": "x"}
        assert loaded.config == cfg
        for name, arr in params.named().items():
            np.testing.assert_array_equal(arr, loaded.named()[name])

    def test_round_trip_preserves_behaviour(self, tmp_path):
        cfg = config(activation="linear")
        params = init_params(cfg, np.random.default_rng(10))
        path = tmp_path / "agent.ckpt"
        save_checkpoint(params, path)
        loaded, _ = load_checkpoint(path)
        a1, _ = act(params, initial_state(cfg), *empty_inputs(cfg))
        a2, _ = act(loaded, initial_state(cfg), *empty_inputs(cfg))
        np.testing.assert_array_equal(a1.utterance, a2.utterance)

    def test_magic_prefix(self):
        cfg = config()
        blob = checkpoint_bytes(init_params(cfg, np.random.default_rng(11)))
        assert blob.startswith(CHECKPOINT_MAGIC)

    def test_truncated_rejected(self):
        cfg = config()
        blob = checkpoint_bytes(init_params(cfg, np.random.default_rng(12)))
        for cut in (4, len(blob) // 2, len(blob) - 3):
            with pytest.raises(CheckpointError):
                load_checkpoint_bytes(blob[:cut])

    def test_bad_magic_rejected(self):
        cfg = config()
        blob = checkpoint_bytes(init_params(cfg, np.random.default_rng(13)))
        with pytest.raises(CheckpointError):
            load_checkpoint_bytes(b"NOTAMAGIC" + blob[9:])

    def test_trailing_garbage_rejected(self):
        cfg = config()
        blob = checkpoint_bytes(init_params(cfg, np.random.default_rng(14)))
        with pytest.raises(CheckpointError):
            load_checkpoint_bytes(blob + b"x")

    def test_dimension_mismatch_rejected(self, tmp_path):
        cfg = config()
        params = init_params(cfg, np.random.default_rng(15))
        path = tmp_path / "agent.ckpt"
        save_checkpoint(params, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected=config(lstm_units=16))

    def test_activation_byte_round_trip(self, tmp_path):
        for activation in ACTIVATIONS:
            cfg = config(activation=activation)
            params = init_params(cfg, np.random.default_rng(16))
            path = tmp_path / f"{activation}.ckpt"
            save_checkpoint(params, path)
            loaded, _ = load_checkpoint(path)
            assert loaded.config.activation == activation

    def test_metadata_defaults_empty(self, tmp_path):
        cfg = config()
        path = tmp_path / "agent.ckpt"
        save_checkpoint(init_params(cfg, np.random.default_rng(17)), path)
        _, meta = load_checkpoint(path)
        assert meta == {}
