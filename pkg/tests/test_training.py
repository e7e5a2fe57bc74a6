"""Trainer behaviour: determinism, replay, noise streams, tape containers."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpaudit.data import synth_gaussians
from dpaudit.errors import DimensionError, DivergenceError, FormatError, ReplayMismatchError
from dpaudit.models import ModelSpec, grads_batch, init_params
from dpaudit.training import (
    DPSGDConfig,
    clip_gradient,
    dpsgd_train,
    load_tape,
    replay_step,
    save_tape,
    sgd_train,
)

SPEC = ModelSpec(kind="logreg", input_dim=4, num_classes=3)
DATA = synth_gaussians(classes=3, dim=4, per_class=12, spread=0.2, seed=0)


def noisy_cfg(**kw):
    base = dict(steps=10, learning_rate=0.05, clip_norm=0.5, noise_multiplier=1.2,
                sampling_prob=0.4, seed=7)
    base.update(kw)
    return DPSGDConfig(**base)


class TestConfig:
    def test_validation(self):
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=0, learning_rate=0.1)
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.0)
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.1, clip_norm=-1.0)
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.1, noise_multiplier=-0.5)
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.1, noise_multiplier=1.0)  # clip inf
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.1, sampling_prob=0.0)
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.1, batch_size=0)
        with pytest.raises(DimensionError):
            DPSGDConfig(steps=1, learning_rate=0.1, dtype="f16")

    def test_round_trip_preserves_inf_clip(self):
        cfg = DPSGDConfig(steps=3, learning_rate=0.1)
        d = cfg.to_dict()
        assert d["clip_norm"] is None
        assert DPSGDConfig.from_dict(d) == cfg
        cfg2 = noisy_cfg()
        assert DPSGDConfig.from_dict(cfg2.to_dict()) == cfg2

    def test_noise_std(self):
        assert noisy_cfg().noise_std == pytest.approx(1.2 * 0.5)
        assert DPSGDConfig(steps=1, learning_rate=0.1).noise_std == 0.0


class TestClipGradient:
    def test_below_threshold_untouched(self):
        g = np.array([0.3, 0.4])
        out = clip_gradient(g, 1.0)
        assert np.array_equal(out, g) and out is not g

    def test_above_threshold_rescaled_to_norm(self):
        g = np.array([3.0, 4.0])
        out = clip_gradient(g, 1.0)
        assert np.linalg.norm(out) == pytest.approx(1.0, rel=1e-12)
        assert np.allclose(out, g / 5.0)

    def test_inf_disables(self):
        g = np.array([3.0, 4.0])
        assert np.array_equal(clip_gradient(g, math.inf), g)

    def test_non_finite_rejected(self):
        with pytest.raises(DimensionError):
            clip_gradient(np.array([np.nan, 0.0]), 1.0)

    @given(st.floats(0.01, 10.0), st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_norm_never_exceeds_threshold(self, c, seed):
        g = np.random.default_rng(seed).standard_normal(6) * 3
        assert np.linalg.norm(clip_gradient(g, c)) <= c * (1 + 1e-12)


class TestDeterminism:
    def test_identical_runs_identical_tapes(self):
        a = dpsgd_train(SPEC, DATA, noisy_cfg())
        b = dpsgd_train(SPEC, DATA, noisy_cfg())
        assert a.final_params.tobytes() == b.final_params.tobytes()
        assert a.checkpoints.tobytes() == b.checkpoints.tobytes()
        assert a.noise_base == b.noise_base
        assert all(np.array_equal(x, z) for x, z in zip(a.index_sets, b.index_sets))

    def test_seed_changes_everything(self):
        a = dpsgd_train(SPEC, DATA, noisy_cfg(seed=7))
        b = dpsgd_train(SPEC, DATA, noisy_cfg(seed=8))
        assert a.final_params.tobytes() != b.final_params.tobytes()
        assert a.noise_base != b.noise_base

    def test_noise_stream_deterministic_and_step_keyed(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        n1 = tape.noise_for_step(1)
        assert np.array_equal(n1, tape.noise_for_step(1))
        assert not np.array_equal(n1, tape.noise_for_step(2))
        quiet = dpsgd_train(SPEC, DATA, noisy_cfg(noise_multiplier=0.0, clip_norm=math.inf))
        assert quiet.noise_for_step(1) is None

    def test_noise_scale(self):
        cfg = noisy_cfg(steps=200)
        tape = dpsgd_train(ModelSpec(kind="mlp1", input_dim=4, num_classes=3,
                                     hidden_dim=30, activation="tanh"), DATA, cfg)
        draws = np.concatenate([tape.noise_for_step(t) for t in range(1, 201)])
        assert draws.std() == pytest.approx(cfg.noise_std, rel=0.03)


class TestSampling:
    def test_poisson_full_probability_takes_everything(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(sampling_prob=1.0))
        for s in tape.index_sets:
            assert np.array_equal(s, np.arange(len(DATA)))

    def test_poisson_sets_sorted_and_in_range(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(steps=40))
        sizes = []
        for s in tape.index_sets:
            assert np.array_equal(s, np.sort(s))
            assert len(np.unique(s)) == len(s)
            if len(s):
                assert 0 <= s.min() and s.max() < len(DATA)
            sizes.append(len(s))
        mean = np.mean(sizes)
        assert abs(mean - 0.4 * len(DATA)) < 4 * math.sqrt(0.4 * 0.6 * len(DATA) / 40)

    def test_minibatches_partition_each_epoch(self):
        n = len(DATA)
        cfg = noisy_cfg(batch_size=9, steps=8, sampling_prob=1.0)
        tape = dpsgd_train(SPEC, DATA, cfg)
        per_epoch = n // 9
        epoch = np.concatenate(tape.index_sets[:per_epoch])
        assert np.array_equal(np.sort(epoch), np.arange(n))

    def test_oversized_batch_capped_at_n(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(batch_size=10_000, steps=3))
        for s in tape.index_sets:
            assert len(s) == len(DATA)


class TestReplay:
    def test_every_step_replays_bit_exactly(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        for t in range(1, tape.steps + 1):
            w_before, w_after, idx, noise = replay_step(tape, t)
            assert w_before.tobytes() == tape.params_at(t - 1).tobytes()
            assert w_after.tobytes() == tape.params_at(t).tobytes()
            assert np.array_equal(idx, tape.index_sets[t - 1])
            assert noise is not None

    def test_tampered_checkpoint_detected(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        tape.checkpoints[4, 0] += 1e-9
        with pytest.raises(ReplayMismatchError) as ei:
            replay_step(tape, 5)
        assert ei.value.step == 5

    def test_tampered_data_detected(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(sampling_prob=1.0))
        tape.X[0, 0] += 0.25
        with pytest.raises(ReplayMismatchError):
            replay_step(tape, 1)

    def test_blackbox_tape_refuses_replay_of_interior(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(record_checkpoints=False))
        assert not tape.has_checkpoints
        with pytest.raises(DimensionError):
            tape.params_at(3)
        with pytest.raises(DimensionError):
            replay_step(tape, 3)
        # the final step is still checkable from init when steps == 1
        one = dpsgd_train(SPEC, DATA, noisy_cfg(steps=1, record_checkpoints=False))
        replay_step(one, 1)

    def test_params_at_bounds(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        with pytest.raises(DimensionError):
            tape.params_at(-1)
        with pytest.raises(DimensionError):
            tape.params_at(tape.steps + 1)
        with pytest.raises(DimensionError):
            tape.noise_for_step(0)


class TestTrainers:
    def test_custom_init_respected(self):
        w0 = init_params(SPEC, seed=99)
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(), init=w0)
        assert tape.init_params.tobytes() == w0.tobytes()

    def test_divergence_raises_with_step(self):
        # noise scale far beyond float32 range overflows the very first update
        cfg = DPSGDConfig(steps=5, learning_rate=0.1, clip_norm=1e30,
                          noise_multiplier=1e10, seed=0, dtype="f32")
        with np.errstate(over="ignore"), pytest.raises(DivergenceError) as ei:
            dpsgd_train(SPEC, DATA, cfg)
        assert ei.value.step == 1

    def test_label_overflow_rejected(self):
        bad = synth_gaussians(classes=4, dim=4, per_class=5, spread=0.1, seed=0)
        with pytest.raises(DimensionError):
            dpsgd_train(SPEC, bad, noisy_cfg())

    def test_sgd_train_guards(self):
        with pytest.raises(DimensionError):
            sgd_train(SPEC, DATA, noisy_cfg())
        with pytest.raises(DimensionError):
            sgd_train(SPEC, DATA, noisy_cfg(noise_multiplier=0.0, clip_norm=1.0))

    def test_sgd_full_batch_is_gradient_descent(self):
        cfg = DPSGDConfig(steps=5, learning_rate=0.1, seed=3)
        tape = sgd_train(SPEC, DATA, cfg)
        w = tape.init_params.copy()
        for _ in range(5):
            w = w - 0.1 * grads_batch(SPEC, w, DATA.X, DATA.y).sum(0)
        assert np.allclose(w, tape.final_params, atol=1e-12)

    def test_f32_tape_stays_f32(self):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(dtype="f32"))
        assert tape.final_params.dtype == np.float32
        assert tape.checkpoints.dtype == np.float32
        for t in range(1, tape.steps + 1):
            replay_step(tape, t)


class TestTapeContainer:
    def test_round_trip(self, tmp_path):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        p = str(tmp_path / "run.dpat")
        save_tape(tape, p)
        back = load_tape(p)
        assert back.spec == tape.spec
        assert back.config == tape.config
        assert back.init_params.tobytes() == tape.init_params.tobytes()
        assert back.checkpoints.tobytes() == tape.checkpoints.tobytes()
        assert back.final_params.tobytes() == tape.final_params.tobytes()
        assert back.noise_base == tape.noise_base
        assert all(np.array_equal(a, b) for a, b in zip(back.index_sets, tape.index_sets))
        assert np.array_equal(back.ids, tape.ids)
        assert np.array_equal(back.canary_slot, tape.canary_slot)
        for t in range(1, back.steps + 1):
            replay_step(back, t)

    def test_round_trip_blackbox_and_f32(self, tmp_path):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg(record_checkpoints=False, dtype="f32"))
        p = str(tmp_path / "run.dpat")
        save_tape(tape, p)
        back = load_tape(p)
        assert not back.has_checkpoints
        assert back.final_params.dtype == np.float32
        assert back.final_params.tobytes() == tape.final_params.tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dpat"
        p.write_bytes(b"notatape" + b"\x00" * 64)
        with pytest.raises(FormatError) as ei:
            load_tape(str(p))
        assert ei.value.offset == 0

    def test_truncation_detected(self, tmp_path):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        p = tmp_path / "run.dpat"
        save_tape(tape, str(p))
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 16])
        with pytest.raises(FormatError):
            load_tape(str(p))

    def test_trailing_garbage_detected(self, tmp_path):
        tape = dpsgd_train(SPEC, DATA, noisy_cfg())
        p = tmp_path / "run.dpat"
        save_tape(tape, str(p))
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_tape(str(p))
