"""Two-stage selector training.

Stage 1 freezes the transformer backbone and alternates strictly between a
next-token instruction batch (cross-entropy, which shapes the alignment
projector) and an importance-score batch (binary cross-entropy against the
fused pseudo-labels, which shapes the score query and head).

Stage 2 trains the score task only, adding per-block low-rank adapters to
the trainable set and decaying the learning rate on a half-cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, TrainingError
from .selector import (
    LoraAdapters,
    SelectorConfig,
    lm_backward_batch,
    lm_forward_batch,
    score_backward_batch,
    score_forward_batch,
    select_trainables,
)

SCHEDULES = ("constant-after-warmup", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.03
    schedule: str = "constant-after-warmup"
    epochs: int = 1
    seed: int = 0
    task_mix: str = "alternate"
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.task_mix != "alternate":
            raise ConfigError(f"only the 'alternate' task mix is supported, got {self.task_mix!r}")


# The full-scale settings these desk-scale runs stand in for; retained for
# documentation, not exercised by tests.
FULL_SCALE_STAGE1 = TrainConfig(
    stage=1, batch_size=128, peak_lr=1e-3, warmup_fraction=0.03,
    schedule="constant-after-warmup", epochs=2,
)
FULL_SCALE_STAGE2 = TrainConfig(
    stage=2, batch_size=128, peak_lr=1e-5, warmup_fraction=0.03,
    schedule="cosine", epochs=5,
)


def lr_at(step: float, total_steps: int, config: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) step position.

    Linear ramp from 0 to peak over the warmup span, then either constant or
    a half-cosine decay to 0 at total_steps. Positions beyond total_steps
    clamp to the final value; the curve is continuous at the boundary.
    """
    if total_steps < 1:
        raise DomainError(f"total_steps must be >= 1, got {total_steps}")
    t = min(max(float(step), 0.0), float(total_steps))
    warmup = config.warmup_fraction * total_steps
    if warmup > 0 and t < warmup:
        return config.peak_lr * t / warmup
    if config.schedule == "constant-after-warmup":
        return config.peak_lr
    span = total_steps - warmup
    if span <= 0:
        return config.peak_lr
    frac = (t - warmup) / span
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class ScoreBatch:
    vis: np.ndarray           # (B, n, m, d_v)
    question_ids: np.ndarray  # (B, l)
    targets: np.ndarray       # (B, n) in [0, 1]

    def __post_init__(self) -> None:
        if self.targets.shape != self.vis.shape[:2]:
            raise DomainError(
                f"targets {self.targets.shape} vs frames {self.vis.shape[:2]}"
            )
        if self.targets.min() < 0.0 or self.targets.max() > 1.0:
            raise DomainError("score targets must lie in [0, 1]")


@dataclass
class InstructionBatch:
    vis: np.ndarray           # (B, n, m, d_v)
    question_ids: np.ndarray  # (B, l)
    response_ids: np.ndarray  # (B, r)


@dataclass(frozen=True)
class LossReport:
    step: int
    task: str                 # "instruction" | "score"
    loss: float
    lr: float
    grad_norm: float

    def to_record(self) -> dict:
        return {
            "step": self.step, "task": self.task, "loss": self.loss,
            "lr": self.lr, "grad_norm": self.grad_norm,
        }


class Adam:
    """Adaptive-moment optimizer over a named tensor set, updated in place.

    Step counts are tracked per tensor: in stage 1 the two alternating tasks
    touch different leaf subsets, and a shared counter would skew the bias
    correction of leaves that only one task updates.
    """

    def __init__(self, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        self._t: dict[str, int] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(
        self,
        tensors: Mapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        lr: float,
    ) -> None:
        b1, b2 = self.betas
        for name, tensor in tensors.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in self._m:
                self._m[name] = np.zeros_like(tensor)
                self._v[name] = np.zeros_like(tensor)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m, v = self._m[name], self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            tensor -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_global_norm(grads: Mapping[str, np.ndarray], names: Sequence[str]) -> float:
    total = 0.0
    for name in names:
        g = grads.get(name)
        if g is not None:
            total += float(np.sum(np.square(g)))
    return math.sqrt(total)


class Trainer:
    """Owns the parameter set, optimizer state, and step counter for one
    training stage. Only the stage's trainable leaves are ever written;
    every other tensor stays bit-identical."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        selector_config: SelectorConfig,
        train_config: TrainConfig,
        adapters: LoraAdapters | None = None,
    ):
        if train_config.stage == 2 and adapters is None:
            raise ConfigError("stage 2 requires low-rank adapters")
        self.params = params
        self.config = selector_config
        self.train_config = train_config
        self.adapters = adapters
        self.trainable_names = select_trainables(train_config.stage, selector_config)
        self._tensors: dict[str, np.ndarray] = {}
        for name in self.trainable_names:
            if adapters is not None and name in adapters.tensors:
                self._tensors[name] = adapters.tensors[name]
            else:
                self._tensors[name] = params[name]
        self.opt = Adam()
        self.global_step = 0
        self.total_steps = 0

    # -- single steps --

    def _apply(self, grads: Mapping[str, np.ndarray], lr: float) -> float:
        norm = grad_global_norm(grads, self.trainable_names)
        filtered = {k: v for k, v in grads.items() if k in self._tensors}
        self.opt.step(self._tensors, filtered, lr)
        return norm

    def _lr(self) -> float:
        if self.total_steps < 1:
            # Direct stepping without a declared horizon: fine for constant
            # schedules, meaningless for a decaying one.
            if self.train_config.schedule == "cosine":
                raise ConfigError(
                    "cosine schedule needs total_steps set before stepping"
                )
            return lr_at(self.global_step + 1, self.global_step + 1, self.train_config)
        return lr_at(self.global_step + 1, self.total_steps, self.train_config)

    def step_score(self, batch: ScoreBatch) -> LossReport:
        lr = self._lr()
        state = score_forward_batch(
            self.params, self.config, batch.vis, batch.question_ids,
            self.adapters, want_cache=True,
        )
        loss, grads = score_backward_batch(
            state, self.params, self.config, batch.targets, self.adapters
        )
        norm = self._apply(grads, lr)
        self.global_step += 1
        return LossReport(self.global_step, "score", loss, lr, norm)

    def step_instruction(self, batch: InstructionBatch) -> LossReport:
        lr = self._lr()
        state = lm_forward_batch(
            self.params, self.config, batch.vis, batch.question_ids,
            batch.response_ids, self.adapters, want_cache=True,
        )
        loss, grads = lm_backward_batch(state, self.params, self.config, self.adapters)
        norm = self._apply(grads, lr)
        self.global_step += 1
        return LossReport(self.global_step, "instruction", loss, lr, norm)

    # -- epochs --

    def _shuffled(self, batches: Sequence, epoch: int, stream: int) -> list:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.train_config.seed, self.train_config.stage, epoch, stream])
        )
        order = rng.permutation(len(batches))
        return [batches[i] for i in order]

    def stage1_epoch(
        self,
        instruction_batches: Sequence[InstructionBatch],
        score_batches: Sequence[ScoreBatch],
        epoch: int = 0,
    ) -> Iterator[LossReport]:
        """One strict instruction/score alternation pass. The number of
        rounds is the smaller of the two batch streams."""
        if self.train_config.stage != 1:
            raise ConfigError("stage1_epoch called on a stage-2 trainer")
        if not instruction_batches or not score_batches:
            raise DomainError("stage 1 needs both instruction and score batches")
        instr = self._shuffled(instruction_batches, epoch, stream=0)
        score = self._shuffled(score_batches, epoch, stream=1)
        for ib, sb in zip(instr, score):
            yield self.step_instruction(ib)
            yield self.step_score(sb)

    def stage2_epoch(
        self, score_batches: Sequence[ScoreBatch], epoch: int = 0
    ) -> Iterator[LossReport]:
        if self.train_config.stage != 2:
            raise ConfigError("stage2_epoch called on a stage-1 trainer")
        if not score_batches:
            raise DomainError("stage 2 needs score batches")
        for sb in self._shuffled(score_batches, epoch, stream=1):
            yield self.step_score(sb)

    # -- full runs --

    def run_stage1(
        self,
        instruction_batches: Sequence[InstructionBatch],
        score_batches: Sequence[ScoreBatch],
    ) -> list[LossReport]:
        rounds = min(len(instruction_batches), len(score_batches))
        self.total_steps = self.train_config.epochs * rounds * 2
        reports: list[LossReport] = []
        for epoch in range(self.train_config.epochs):
            reports.extend(self.stage1_epoch(instruction_batches, score_batches, epoch))
        return reports

    def run_stage2(self, score_batches: Sequence[ScoreBatch]) -> list[LossReport]:
        self.total_steps = self.train_config.epochs * len(score_batches)
        reports: list[LossReport] = []
        for epoch in range(self.train_config.epochs):
            reports.extend(self.stage2_epoch(score_batches, epoch))
        return reports


def make_batches(
    vis: np.ndarray,
    question_ids: np.ndarray,
    targets: np.ndarray | None,
    response_ids: np.ndarray | None,
    batch_size: int,
) -> list:
    """Slice aligned example arrays into fixed-size batches (tail dropped so
    every batch has the same width)."""
    count = vis.shape[0] // batch_size
    if count < 1:
        raise DomainError(
            f"{vis.shape[0]} examples cannot fill one batch of {batch_size}"
        )
    out = []
    for b in range(count):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        if targets is not None:
            out.append(ScoreBatch(vis[sl], question_ids[sl], targets[sl]))
        else:
            assert response_ids is not None
            out.append(InstructionBatch(vis[sl], question_ids[sl], response_ids[sl]))
    return out
