import numpy as np
import pytest

from frameselect.errors import ConfigError, DomainError
from frameselect.frames import TokenGrid
from frameselect.selector import (
    SelectorConfig,
    backward,
    bce_with_logits,
    forward,
    init_lora,
    init_params,
    lm_backward_batch,
    lm_forward_batch,
    run_blocks,
    select_trainables,
    sigmoid,
    softmax_xent,
    tensor_fingerprint,
)
from frameselect.tokenizer import tokenize_question

from conftest import random_frames
from reference_impls import bce_reference, xent_reference


def _question(cfg, text="what happens at the end"):
    return tokenize_question(text, cfg.vocab, cfg.l_max)


class TestConfig:
    def test_rejects_single_block(self):
        with pytest.raises(ConfigError):
            SelectorConfig(n_blocks=1)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            SelectorConfig(d=30, heads=4)

    def test_roundtrip(self):
        cfg = SelectorConfig(d=32, heads=2)
        assert SelectorConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            SelectorConfig.from_dict({"d": 32, "bogus": 1})


class TestForwardContract:
    def test_scores_shape_and_range(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        frames = random_frames(rng, 4, 2, tiny_config.d_v)
        trace = forward(tiny_params, tiny_config, frames, _question(tiny_config))
        assert trace.scores.shape == (4,)
        assert np.all(trace.scores > 0) and np.all(trace.scores < 1)
        assert trace.query_state.shape == (tiny_config.d,)
        assert trace.frame_states.shape == (4, tiny_config.d)

    def test_zero_score_head_gives_half(self, tiny_config):
        params = init_params(tiny_config, seed=2, zero_score_out=True)
        rng = np.random.default_rng(1)
        frames = random_frames(rng, 3, 2, tiny_config.d_v)
        trace = forward(params, tiny_config, frames, _question(tiny_config))
        np.testing.assert_array_equal(trace.scores, np.full(3, 0.5))

    def test_too_many_frames_rejected(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        frames = random_frames(rng, tiny_config.n_max + 1, 2, tiny_config.d_v)
        with pytest.raises(DomainError):
            forward(tiny_params, tiny_config, frames, _question(tiny_config))

    def test_wrong_feature_dim_rejected(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        frames = random_frames(rng, 2, 2, tiny_config.d_v + 1)
        with pytest.raises(DomainError):
            forward(tiny_params, tiny_config, frames, _question(tiny_config))

    def test_deterministic_bit_identical(self, tiny_config, tiny_params):
        rng = np.random.default_rng(5)
        frames = random_frames(rng, 4, 2, tiny_config.d_v)
        q = _question(tiny_config)
        a = forward(tiny_params, tiny_config, frames, q).scores
        b = forward(tiny_params, tiny_config, frames, q).scores
        np.testing.assert_array_equal(a, b)


class TestCausality:
    def test_junk_after_sequence_end_cannot_change_scores(self, tiny_config, tiny_params):
        """Tokens appended after the score query are causally invisible."""
        rng = np.random.default_rng(9)
        cfg, params = tiny_config, tiny_params
        frames = random_frames(rng, 3, 2, cfg.d_v)
        q = _question(cfg)
        trace = forward(params, cfg, frames, q)

        from frameselect.selector import _embed_sequence, _gelu

        vis = np.stack([f.tokens() for f in frames])[None]
        qids = np.asarray(q.ids)[None, :]
        x, _ = _embed_sequence(params, cfg, vis, qids)
        junk = rng.standard_normal((1, 3, cfg.d))
        x_junk = np.concatenate([x, junk], axis=1)
        h, _ = run_blocks(params, cfg, x_junk, num_blocks=cfg.n_blocks - 1)
        e_q = h[:, x.shape[1] - 1, :]
        z1 = e_q @ params["score_w1"] + params["score_b1"]
        a1, _ = _gelu(z1)
        logits = a1 @ params["score_w2"] + params["score_b2"]
        scores = sigmoid(logits[0, :3])
        np.testing.assert_array_equal(scores, trace.scores)


class TestLora:
    def test_zero_b_is_bit_identical(self, tiny_config, tiny_params):
        rng = np.random.default_rng(3)
        adapters = init_lora(tiny_config, rank=2, alpha=4.0, seed=7)
        for _ in range(10):
            frames = random_frames(rng, 4, 2, tiny_config.d_v)
            q = _question(tiny_config)
            base = forward(tiny_params, tiny_config, frames, q).scores
            adapted = forward(tiny_params, tiny_config, frames, q, adapters=adapters).scores
            np.testing.assert_array_equal(base, adapted)

    def test_nonzero_b_changes_scores(self, tiny_config, tiny_params):
        rng = np.random.default_rng(4)
        adapters = init_lora(tiny_config, rank=2, alpha=4.0, seed=7)
        for name in adapters.tensors:
            if name.endswith("_b"):
                adapters.tensors[name] = rng.standard_normal(
                    adapters.tensors[name].shape
                )
        frames = random_frames(rng, 4, 2, tiny_config.d_v)
        q = _question(tiny_config)
        base = forward(tiny_params, tiny_config, frames, q).scores
        adapted = forward(tiny_params, tiny_config, frames, q, adapters=adapters).scores
        assert not np.array_equal(base, adapted)

    def test_rank_validated(self, tiny_config):
        with pytest.raises(ConfigError):
            init_lora(tiny_config, rank=0)


class TestSelectTrainables:
    def test_stage1_excludes_backbone_and_adapters(self, tiny_config):
        names = select_trainables(1, tiny_config)
        assert "proj_w" in names and "score_query" in names and "score_w2" in names
        assert not any(n.startswith("blk") for n in names)
        assert not any("lora" in n for n in names)

    def test_stage2_adds_adapters(self, tiny_config):
        names = select_trainables(2, tiny_config)
        assert "blk0_lora_a" in names and "blk1_lora_b" in names

    def test_stage3_rejected(self, tiny_config):
        with pytest.raises(DomainError):
            select_trainables(3, tiny_config)


class TestLosses:
    def test_bce_matches_straight_line_formula(self):
        rng = np.random.default_rng(21)
        z = rng.uniform(-6, 6, size=200)
        t = rng.uniform(size=200)
        loss, _ = bce_with_logits(z, t)
        ref = bce_reference(sigmoid(z), t)
        assert abs(loss - ref) < 1e-10

    def test_bce_stationary_at_half(self):
        z = np.zeros(5)
        t = np.full(5, 0.5)
        loss, dz = bce_with_logits(z, t)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)
        np.testing.assert_allclose(dz, 0.0, atol=1e-15)

    def test_bce_limit_zero_target(self):
        z = np.full(4, -40.0)  # s -> 0
        t = np.zeros(4)
        loss, _ = bce_with_logits(z, t)
        assert loss < 1e-12

    def test_xent_matches_straight_line_formula(self):
        rng = np.random.default_rng(22)
        logits = rng.uniform(-4, 4, size=(6, 11))
        targets = rng.integers(0, 11, size=6)
        loss, _ = softmax_xent(logits, targets)
        ref = xent_reference(logits.tolist(), targets.tolist())
        assert abs(loss - ref) < 1e-10


def _spot_gradcheck(loss_fn, tensors, names, h=1e-5, rtol=1e-4, atol=1e-8, per_tensor=4):
    """Central finite differences on a few entries of each named tensor."""
    base = loss_fn()
    failures = []
    for name in names:
        t = tensors[name]
        g = base.grads[name] if hasattr(base, "grads") else base[1][name]
        rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
        flat = t.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_fn().loss if hasattr(base, "loss") else loss_fn()[0]
            flat[idx] = orig - h
            lm = loss_fn().loss if hasattr(base, "loss") else loss_fn()[0]
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            if abs(fd - gflat[idx]) > rtol * max(abs(fd), abs(gflat[idx])) + atol:
                failures.append((name, int(idx), float(gflat[idx]), float(fd)))
    assert not failures, f"gradient mismatches: {failures}"


class TestGradcheck:
    def test_score_task_all_trainables(self, tiny_config):
        cfg = tiny_config
        params = init_params(cfg, seed=1, zero_score_out=False)
        adapters = init_lora(cfg, rank=2, alpha=4.0, seed=2)
        rng = np.random.default_rng(0)
        for name in adapters.tensors:
            adapters.tensors[name] = rng.standard_normal(adapters.tensors[name].shape) * 0.1
        frames = random_frames(rng, 3, 2, cfg.d_v)
        q = _question(cfg)
        target = rng.uniform(0.05, 0.95, size=3)

        def loss_fn():
            trace = forward(params, cfg, frames, q, adapters=adapters, want_cache=True)
            return backward(trace, params, cfg, target, adapters=adapters)

        tensors = {**params, **adapters.tensors}
        _spot_gradcheck(loss_fn, tensors, select_trainables(2, cfg))

    def test_instruction_task_projector(self, tiny_config):
        cfg = tiny_config
        params = init_params(cfg, seed=3, zero_score_out=False)
        rng = np.random.default_rng(1)
        vis = rng.standard_normal((1, 3, cfg.m, cfg.d_v))
        qids = rng.integers(1, cfg.vocab, size=(1, 4))
        resp = rng.integers(1, cfg.vocab, size=(1, 3))

        def loss_fn():
            state = lm_forward_batch(params, cfg, vis, qids, resp, want_cache=True)
            return lm_backward_batch(state, params, cfg)

        _spot_gradcheck(loss_fn, params, ("proj_w", "proj_b"))


class TestBackwardContract:
    def test_target_length_mismatch(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        frames = random_frames(rng, 3, 2, tiny_config.d_v)
        trace = forward(tiny_params, tiny_config, frames, _question(tiny_config), want_cache=True)
        with pytest.raises(DomainError):
            backward(trace, tiny_params, tiny_config, np.zeros(5))

    def test_requires_cached_trace(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        frames = random_frames(rng, 3, 2, tiny_config.d_v)
        trace = forward(tiny_params, tiny_config, frames, _question(tiny_config))
        with pytest.raises(DomainError):
            backward(trace, tiny_params, tiny_config, np.zeros(3))

    def test_unknown_loss_kind(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        frames = random_frames(rng, 3, 2, tiny_config.d_v)
        trace = forward(tiny_params, tiny_config, frames, _question(tiny_config), want_cache=True)
        with pytest.raises(DomainError):
            backward(trace, tiny_params, tiny_config, np.zeros(3), loss_kind="huber")

    def test_gradients_cover_exactly_the_trainables(self, tiny_config, tiny_params):
        rng = np.random.default_rng(0)
        adapters = init_lora(tiny_config, rank=2, seed=0)
        frames = random_frames(rng, 3, 2, tiny_config.d_v)
        trace = forward(
            tiny_params, tiny_config, frames, _question(tiny_config),
            adapters=adapters, want_cache=True,
        )
        result = backward(trace, tiny_params, tiny_config, np.zeros(3), adapters=adapters)
        assert set(result.grads) == set(select_trainables(2, tiny_config))


class TestFingerprint:
    def test_detects_any_change(self, tiny_params):
        before = tensor_fingerprint(tiny_params)
        tiny_params["blk0_wq"][0, 0] += 1e-9
        assert tensor_fingerprint(tiny_params) != before
