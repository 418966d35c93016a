import math

import numpy as np
import pytest

from frameselect.errors import ConfigError, DomainError, TrainingError
from frameselect.selector import (
    init_lora,
    init_params,
    select_trainables,
    tensor_fingerprint,
)
from frameselect.training import (
    Adam,
    InstructionBatch,
    LossReport,
    ScoreBatch,
    TrainConfig,
    Trainer,
    lr_at,
    make_batches,
)


def _score_batch(cfg, rng, b=4, n=3, sharp=False):
    vis = rng.standard_normal((b, n, cfg.m, cfg.d_v))
    qids = rng.integers(1, cfg.vocab, size=(b, 4))
    targets = rng.uniform(size=(b, n))
    if sharp:
        targets = (targets > 0.5).astype(np.float64)
    return ScoreBatch(vis, qids, targets)


def _instr_batch(cfg, rng, b=4, n=3):
    vis = rng.standard_normal((b, n, cfg.m, cfg.d_v))
    qids = rng.integers(1, cfg.vocab, size=(b, 4))
    resp = rng.integers(1, cfg.vocab, size=(b, 3))
    return InstructionBatch(vis, qids, resp)


class TestLrSchedule:
    def test_ramp_reaches_peak_at_warmup_end(self):
        cfg = TrainConfig(stage=1, peak_lr=1.0, warmup_fraction=0.1)
        assert lr_at(10, 100, cfg) == pytest.approx(1.0)
        assert lr_at(5, 100, cfg) == pytest.approx(0.5)

    def test_constant_after_warmup(self):
        cfg = TrainConfig(stage=1, peak_lr=2.0, warmup_fraction=0.1)
        assert lr_at(50, 100, cfg) == pytest.approx(2.0)
        assert lr_at(100, 100, cfg) == pytest.approx(2.0)

    def test_cosine_hits_zero_at_end(self):
        cfg = TrainConfig(stage=2, peak_lr=1.0, warmup_fraction=0.0, schedule="cosine")
        assert lr_at(100, 100, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_cosine_midpoint_is_half_peak(self):
        cfg = TrainConfig(stage=2, peak_lr=1.0, warmup_fraction=0.0, schedule="cosine")
        assert lr_at(50, 100, cfg) == pytest.approx(0.5)

    def test_clamps_beyond_total(self):
        cfg = TrainConfig(stage=2, peak_lr=1.0, warmup_fraction=0.0, schedule="cosine")
        assert lr_at(150, 100, cfg) == pytest.approx(0.0, abs=1e-12)
        constant = TrainConfig(stage=1, peak_lr=3.0, warmup_fraction=0.03)
        assert lr_at(150, 100, constant) == pytest.approx(3.0)

    def test_continuous_at_warmup_boundary(self):
        for schedule in ("constant-after-warmup", "cosine"):
            cfg = TrainConfig(stage=1 if schedule.startswith("c") else 2,
                              peak_lr=1.0, warmup_fraction=0.25, schedule=schedule)
            eps = 1e-9
            below = lr_at(25 - eps, 100, cfg)
            above = lr_at(25 + eps, 100, cfg)
            assert abs(below - above) < 1e-6

    def test_zero_warmup_starts_at_peak(self):
        cfg = TrainConfig(stage=1, peak_lr=1.0, warmup_fraction=0.0)
        assert lr_at(0, 100, cfg) == pytest.approx(1.0)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(stage=3)
        with pytest.raises(ConfigError):
            TrainConfig(stage=1, warmup_fraction=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(stage=1, peak_lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(stage=1, schedule="linear")


class TestAdam:
    def test_moves_toward_minimum(self):
        x = {"w": np.array([5.0])}
        opt = Adam()
        for _ in range(200):
            g = {"w": 2.0 * x["w"]}  # d/dw of w^2
            opt.step(x, g, lr=0.1)
        assert abs(x["w"][0]) < 0.1

    def test_skips_missing_grads(self):
        x = {"a": np.ones(2), "b": np.ones(2)}
        before = x["b"].copy()
        Adam().step(x, {"a": np.ones(2)}, lr=0.1)
        np.testing.assert_array_equal(x["b"], before)


class TestStage1:
    def test_strict_alternation(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        rng = np.random.default_rng(0)
        tc = TrainConfig(stage=1, epochs=1, seed=1)
        trainer = Trainer(params, tiny_config, tc)
        instr = [_instr_batch(tiny_config, rng) for _ in range(2)]
        score = [_score_batch(tiny_config, rng) for _ in range(2)]
        reports = trainer.run_stage1(instr, score)
        assert [r.task for r in reports] == ["instruction", "score", "instruction", "score"]

    def test_frozen_backbone_bit_identical(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        rng = np.random.default_rng(1)
        frozen_names = [
            n for n in params if n not in select_trainables(1, tiny_config)
        ]
        before = tensor_fingerprint({n: params[n] for n in frozen_names})
        tc = TrainConfig(stage=1, epochs=2, seed=1)
        trainer = Trainer(params, tiny_config, tc)
        instr = [_instr_batch(tiny_config, rng) for _ in range(3)]
        score = [_score_batch(tiny_config, rng) for _ in range(3)]
        trainer.run_stage1(instr, score)
        after = tensor_fingerprint({n: params[n] for n in frozen_names})
        assert before == after

    def test_trainables_actually_move(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        rng = np.random.default_rng(2)
        before = tensor_fingerprint(
            {n: params[n] for n in select_trainables(1, tiny_config)}
        )
        trainer = Trainer(params, tiny_config, TrainConfig(stage=1, epochs=1, seed=1))
        trainer.run_stage1(
            [_instr_batch(tiny_config, rng)], [_score_batch(tiny_config, rng)]
        )
        assert tensor_fingerprint(
            {n: params[n] for n in select_trainables(1, tiny_config)}
        ) != before

    def test_bit_reproducible_across_runs(self, tiny_config):
        outs = []
        for _ in range(2):
            params = init_params(tiny_config, seed=0)
            rng = np.random.default_rng(3)
            trainer = Trainer(params, tiny_config, TrainConfig(stage=1, epochs=2, seed=9))
            instr = [_instr_batch(tiny_config, rng) for _ in range(3)]
            score = [_score_batch(tiny_config, rng) for _ in range(3)]
            reports = trainer.run_stage1(instr, score)
            outs.append((tensor_fingerprint(params), tuple(r.loss for r in reports)))
        assert outs[0] == outs[1]

    def test_loss_reports_carry_lr_and_norm(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        rng = np.random.default_rng(4)
        trainer = Trainer(params, tiny_config, TrainConfig(stage=1, epochs=1, seed=1))
        reports = trainer.run_stage1(
            [_instr_batch(tiny_config, rng)], [_score_batch(tiny_config, rng)]
        )
        for r in reports:
            assert math.isfinite(r.loss)
            assert r.lr > 0
            assert r.grad_norm >= 0


class TestStage2:
    def test_requires_adapters(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        with pytest.raises(ConfigError):
            Trainer(params, tiny_config, TrainConfig(stage=2))

    def test_lora_identity_then_updates(self, tiny_config):
        from frameselect.selector import forward
        from frameselect.tokenizer import tokenize_question
        from conftest import random_frames

        params = init_params(tiny_config, seed=0)
        adapters = init_lora(tiny_config, rank=2, seed=1)
        rng = np.random.default_rng(5)
        frames = random_frames(rng, 3, 2, tiny_config.d_v)
        q = tokenize_question("what", tiny_config.vocab)
        base = forward(params, tiny_config, frames, q).scores
        with_fresh = forward(params, tiny_config, frames, q, adapters=adapters).scores
        np.testing.assert_array_equal(base, with_fresh)

        trainer = Trainer(params, tiny_config, TrainConfig(stage=2, epochs=1, seed=1),
                          adapters=adapters)
        trainer.run_stage2([_score_batch(tiny_config, rng)])
        b_tensors = [adapters.tensors[f"blk0_lora_b"], adapters.tensors[f"blk1_lora_b"]]
        assert any(np.any(t != 0) for t in b_tensors)

    def test_monotone_descent_on_repeated_batch(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        adapters = init_lora(tiny_config, rank=2, seed=1)
        rng = np.random.default_rng(6)
        batch = _score_batch(tiny_config, rng, b=8, n=3, sharp=True)
        tc = TrainConfig(stage=2, epochs=50, peak_lr=3e-3, seed=1,
                         schedule="constant-after-warmup", warmup_fraction=0.0)
        trainer = Trainer(params, tiny_config, tc, adapters=adapters)
        trainer.total_steps = 50
        losses = [trainer.step_score(batch).loss for _ in range(50)]
        non_monotone = sum(1 for a, b in zip(losses, losses[1:]) if b > a + 1e-12)
        assert losses[-1] < losses[0]
        assert non_monotone <= 5

    def test_nan_loss_aborts_with_diagnostic(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        params["score_w1"][:] = np.inf
        adapters = init_lora(tiny_config, rank=2, seed=1)
        trainer = Trainer(params, tiny_config, TrainConfig(stage=2, epochs=1, seed=1),
                          adapters=adapters)
        rng = np.random.default_rng(7)
        with pytest.raises(TrainingError):
            trainer.step_score(_score_batch(tiny_config, rng))


class TestMakeBatches:
    def test_uniform_batches_tail_dropped(self, tiny_config):
        rng = np.random.default_rng(8)
        vis = rng.standard_normal((10, 3, tiny_config.m, tiny_config.d_v))
        qids = rng.integers(1, 64, size=(10, 4))
        targets = rng.uniform(size=(10, 3))
        batches = make_batches(vis, qids, targets, None, 4)
        assert len(batches) == 2
        assert all(b.vis.shape[0] == 4 for b in batches)

    def test_too_few_examples(self, tiny_config):
        rng = np.random.default_rng(9)
        with pytest.raises(DomainError):
            make_batches(
                rng.standard_normal((3, 2, tiny_config.m, tiny_config.d_v)),
                rng.integers(1, 64, size=(3, 4)),
                rng.uniform(size=(3, 2)),
                None,
                8,
            )

    def test_target_range_validated(self, tiny_config):
        rng = np.random.default_rng(10)
        with pytest.raises(DomainError):
            ScoreBatch(
                rng.standard_normal((2, 3, tiny_config.m, tiny_config.d_v)),
                rng.integers(1, 64, size=(2, 4)),
                np.array([[0.5, 1.5, 0.0], [0.0, 0.0, 0.0]]),
            )
