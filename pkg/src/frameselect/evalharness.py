"""Synthetic evaluation harness.

Ground truth the real benchmarks lack is planted here: each synthetic task
hides a question-correlated signal direction inside the feature grids of a
few "key" frames. A selection hits when it intersects the key set, so
selection policies and scorers can be compared on hit rate and recall, and
a parametric downstream stand-in converts hits into a modeled QA accuracy.

The timeline variant plants key segments on a long frame timeline and
materializes candidate pools of different sizes from it, reproducing the
pool-size sweep: a larger uniformly sampled pool can only improve the
chance that some candidate lands inside a key segment.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .backends import ChatBackend, ChatRequest, ImagePayload, ResponseCache
from .errors import ConfigError, DomainError
from .frames import TokenGrid, centered_indices
from .pseudolabel import label_video
from .selection import (
    ImportanceVector,
    SelectionResult,
    nms_greedy,
    random_k,
    topk,
    uniform_k,
)
from .selector import LoraAdapters, SelectorConfig, forward
from .tokenizer import tokenize_question

def _stable_id_hash(text: str) -> int:
    """Process-independent 32-bit hash (builtin str hashing is salted)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


DEFAULT_CUE_WORDS = (
    "sunrise", "collision", "handshake", "goal",
    "splash", "whistle", "eruption", "rainbow",
)
QUESTION_TEMPLATE = "When does the {word} moment happen in this clip?"
RESPONSE_TEMPLATE = "It shows the {word} moment."


@dataclass(frozen=True)
class SignalCatalog:
    """Cue words and the unit feature directions they correspond to.

    Shared between the synthetic generator (which injects a cue's direction
    into key frames) and the deterministic mock backend (which detects it).
    """

    words: tuple[str, ...]
    vectors: np.ndarray = field(repr=False)  # (len(words), d_v), unit rows
    seed: int = 0

    @classmethod
    def default(cls, d_v: int, seed: int = 7, words: Sequence[str] = DEFAULT_CUE_WORDS) -> "SignalCatalog":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA7]))
        vecs = rng.standard_normal((len(words), d_v))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        return cls(words=tuple(words), vectors=vecs, seed=seed)

    @property
    def d_v(self) -> int:
        return self.vectors.shape[1]

    def vector_for(self, word: str) -> np.ndarray:
        return self.vectors[self.words.index(word)]

    def question_for(self, word: str) -> str:
        return QUESTION_TEMPLATE.format(word=word)

    def response_for(self, word: str) -> str:
        return RESPONSE_TEMPLATE.format(word=word)

    def pairs(self) -> list[tuple[str, np.ndarray]]:
        return [(w, self.vectors[i]) for i, w in enumerate(self.words)]


@dataclass(frozen=True)
class SyntheticTask:
    """One planted-key scoring task.

    grids is (n, g, g, d_v) float32, or None for tasks materialized without
    features (oracle-only sweeps).
    """

    task_id: str
    n: int
    question: str
    cue: str
    key_set: frozenset[int]
    noise: float
    grids: np.ndarray | None = field(repr=False, default=None)

    def frames(self) -> list[TokenGrid]:
        if self.grids is None:
            raise DomainError(f"task {self.task_id} was materialized without features")
        return [TokenGrid(i, self.grids[i]) for i in range(self.n)]


def _make_grids(
    rng: np.random.Generator,
    n: int,
    g: int,
    d_v: int,
    keys: np.ndarray,
    signal: np.ndarray,
    noise: float,
    signal_scale: float,
) -> np.ndarray:
    grids = noise * rng.standard_normal((n, g, g, d_v))
    grids[keys] += signal_scale * signal
    return grids.astype(np.float32)


def gen_tasks(
    count: int,
    n: int,
    key_count: int = 1,
    noise: float = 0.1,
    seed: int = 0,
    catalog: SignalCatalog | None = None,
    g: int = 3,
    d_v: int = 16,
    signal_scale: float = 1.0,
) -> list[SyntheticTask]:
    """Reproducible planted-key tasks: key frames carry the question's cue
    direction on top of white noise; all other frames are pure noise."""
    if count < 1 or n < 1:
        raise DomainError("count and n must be >= 1")
    if not 1 <= key_count <= n:
        raise DomainError(f"key_count must be in [1, n], got {key_count}")
    cat = catalog or SignalCatalog.default(d_v)
    if cat.d_v != d_v:
        raise DomainError(f"catalog dim {cat.d_v} != requested d_v {d_v}")
    tasks = []
    for t in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        cue = cat.words[int(rng.integers(len(cat.words)))]
        keys = np.sort(rng.choice(n, size=key_count, replace=False))
        grids = _make_grids(rng, n, g, d_v, keys, cat.vector_for(cue), noise, signal_scale)
        tasks.append(
            SyntheticTask(
                task_id=f"synth-{seed}-{t:05d}",
                n=n,
                question=cat.question_for(cue),
                cue=cue,
                key_set=frozenset(int(k) for k in keys),
                noise=noise,
                grids=grids,
            )
        )
    return tasks


# -------------------------- scorers --------------------------


Scorer = Callable[[SyntheticTask], ImportanceVector]


def oracle_scorer(task: SyntheticTask) -> ImportanceVector:
    scores = [1.0 if i in task.key_set else 0.0 for i in range(task.n)]
    return ImportanceVector(scores=tuple(scores), provenance="oracle")


def constant_scorer(task: SyntheticTask) -> ImportanceVector:
    return ImportanceVector(scores=(0.5,) * task.n, provenance="selector")


class RandomScorer:
    """Seeded per-task uniform scores."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, task: SyntheticTask) -> ImportanceVector:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _stable_id_hash(task.task_id)])
        )
        return ImportanceVector(
            scores=tuple(float(x) for x in rng.uniform(size=task.n)),
            provenance="selector",
        )


class SelectorScorer:
    """Scores tasks with a trained selector.

    prime() runs whole task suites through the batched forward pass up
    front; per-task calls then just look the vectors up.
    """

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        config: SelectorConfig,
        adapters: LoraAdapters | None = None,
    ):
        self.params = params
        self.config = config
        self.adapters = adapters
        self._primed: dict[str, ImportanceVector] = {}

    def prime(self, tasks: Sequence[SyntheticTask], batch_size: int = 64) -> None:
        from .selector import score_forward_batch
        from .tokenizer import tokenize

        groups: dict[tuple[int, int], list[SyntheticTask]] = {}
        for task in tasks:
            qlen = len(tokenize(task.question, self.config.vocab, self.config.l_max))
            groups.setdefault((task.n, qlen), []).append(task)
        for (n, _), members in groups.items():
            for lo in range(0, len(members), batch_size):
                chunk = members[lo : lo + batch_size]
                vis = np.stack([
                    t.grids.reshape(n, self.config.m, self.config.d_v) for t in chunk
                ])
                qids = np.array([
                    tokenize(t.question, self.config.vocab, self.config.l_max)
                    for t in chunk
                ], dtype=np.int64)
                state = score_forward_batch(self.params, self.config, vis, qids, self.adapters)
                for row, task in enumerate(chunk):
                    self._primed[task.task_id] = ImportanceVector(
                        scores=tuple(float(s) for s in state.scores[row]),
                        provenance="selector",
                    )

    def __call__(self, task: SyntheticTask) -> ImportanceVector:
        hit = self._primed.get(task.task_id)
        if hit is not None:
            return hit
        q = tokenize_question(task.question, self.config.vocab, self.config.l_max)
        trace = forward(self.params, self.config, task.frames(), q, self.adapters)
        return ImportanceVector(
            scores=tuple(float(s) for s in trace.scores), provenance="selector"
        )


class MockLabelScorer:
    """Scores tasks with fused pseudo-labels from a chat backend."""

    def __init__(self, backend: ChatBackend, want: int = 8, cache: ResponseCache | None = None):
        self.backend = backend
        self.want = want
        self.cache = cache

    def __call__(self, task: SyntheticTask) -> ImportanceVector:
        record = label_video(
            self.backend, task.frames(), task.question,
            video_id=task.task_id, question_id=task.task_id,
            want=self.want, cache=self.cache,
        )
        return ImportanceVector(scores=record.fused, provenance="fused")


# -------------------------- policy evaluation --------------------------


@dataclass(frozen=True)
class EvalReport:
    policy: str
    k: int
    n: int
    task_count: int
    hit_rate: float
    recall: float
    modeled_accuracy: float | None = None
    mean_runtime_s: float | None = None

    def to_record(self) -> dict:
        # Runtime is intentionally left out: reports must be byte-identical
        # across reruns with the same config and seed.
        rec = {
            "policy": self.policy, "k": self.k, "n": self.n,
            "task_count": self.task_count,
            "hit_rate": self.hit_rate, "recall": self.recall,
        }
        if self.modeled_accuracy is not None:
            rec["modeled_accuracy"] = self.modeled_accuracy
        return rec


@dataclass(frozen=True)
class ParametricDownstream:
    """Downstream QA stand-in: answers correctly with probability a_hit when
    at least one key frame was selected, a_miss otherwise."""

    a_hit: float = 0.9
    a_miss: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.a_miss <= self.a_hit <= 1.0:
            raise ConfigError(
                f"need 0 <= a_miss <= a_hit <= 1, got {self.a_miss}, {self.a_hit}"
            )

    def accuracy(self, hit: bool) -> float:
        return self.a_hit if hit else self.a_miss


def select_with_policy(
    scores: ImportanceVector | None,
    n: int,
    policy: str,
    k: int,
    rng: np.random.Generator | None = None,
) -> SelectionResult:
    if policy == "nms-greedy":
        if scores is None:
            raise DomainError("nms-greedy requires importance scores")
        return nms_greedy(scores, k)
    if policy == "topk":
        if scores is None:
            raise DomainError("topk requires importance scores")
        return topk(scores, k)
    if policy == "uniform":
        return uniform_k(n, k)
    if policy == "random":
        if rng is None:
            raise DomainError("random policy requires an rng")
        return random_k(n, k, rng)
    raise DomainError(f"unknown policy {policy!r}")


def evaluate_policy(
    tasks: Sequence[SyntheticTask],
    scorer: Scorer | None,
    policy: str,
    k: int,
    seed: int = 0,
    downstream: ParametricDownstream | None = None,
) -> EvalReport:
    """Run one (scorer, policy, k) combination over a task suite."""
    if not tasks:
        raise DomainError("no tasks to evaluate")
    n = tasks[0].n
    if any(t.n != n for t in tasks):
        raise DomainError("all tasks in one evaluation must share n")
    if not 1 <= k <= n:
        raise DomainError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    hits = 0
    recall_sum = 0.0
    recall_count = 0
    acc_sum = 0.0
    started = time.perf_counter()
    for i, task in enumerate(tasks):
        scores = scorer(task) if policy in ("nms-greedy", "topk") else None
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        result = select_with_policy(scores, task.n, policy, k, rng)
        overlap = len(set(result.selected) & task.key_set)
        hit = overlap > 0
        hits += int(hit)
        if task.key_set:
            recall_sum += overlap / len(task.key_set)
            recall_count += 1
        if downstream is not None:
            acc_sum += downstream.accuracy(hit)
    elapsed = time.perf_counter() - started
    count = len(tasks)
    return EvalReport(
        policy=policy,
        k=k,
        n=n,
        task_count=count,
        hit_rate=hits / count,
        recall=recall_sum / recall_count if recall_count else 0.0,
        modeled_accuracy=acc_sum / count if downstream is not None else None,
        mean_runtime_s=elapsed / count,
    )


# -------------------------- pool-size sweep --------------------------


@dataclass(frozen=True)
class TimelineTask:
    """Key segments planted on a long frame timeline, before any candidate
    pool is sampled from it."""

    task_id: str
    total_frames: int
    segments: tuple[tuple[int, int], ...]  # inclusive [start, end] spans
    cue: str
    noise: float

    def covers(self, frame_index: int) -> bool:
        return any(a <= frame_index <= b for a, b in self.segments)


def gen_timeline_tasks(
    count: int,
    total_frames: int = 1024,
    segment_width: int = 48,
    segments_per_task: int = 1,
    noise: float = 0.1,
    seed: int = 0,
    catalog: SignalCatalog | None = None,
) -> list[TimelineTask]:
    if segment_width < 1 or segment_width > total_frames:
        raise DomainError(f"segment_width {segment_width} outside [1, {total_frames}]")
    cat = catalog or SignalCatalog.default(16)
    tasks = []
    for t in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x71, t]))
        cue = cat.words[int(rng.integers(len(cat.words)))]
        segs = []
        for _ in range(segments_per_task):
            start = int(rng.integers(0, total_frames - segment_width + 1))
            segs.append((start, start + segment_width - 1))
        tasks.append(
            TimelineTask(
                task_id=f"tl-{seed}-{t:05d}",
                total_frames=total_frames,
                segments=tuple(segs),
                cue=cue,
                noise=noise,
            )
        )
    return tasks


def materialize_pool(
    task: TimelineTask,
    n: int,
    catalog: SignalCatalog | None = None,
    g: int = 3,
    d_v: int = 16,
    signal_scale: float = 1.0,
    with_features: bool = True,
) -> SyntheticTask:
    """Sample an n-frame candidate pool from the timeline; candidates whose
    timeline index falls inside a key segment become the pool's key set."""
    cat = catalog or SignalCatalog.default(d_v)
    plan = centered_indices(task.total_frames, n)
    keys = np.array([j for j, idx in enumerate(plan) if task.covers(int(idx))], dtype=np.int64)
    grids = None
    if with_features:
        rng = np.random.default_rng(
            np.random.SeedSequence([_stable_id_hash(task.task_id), n])
        )
        grids = _make_grids(rng, n, g, d_v, keys, cat.vector_for(task.cue), task.noise, signal_scale)
    return SyntheticTask(
        task_id=f"{task.task_id}@n{n}",
        n=n,
        question=cat.question_for(task.cue),
        cue=task.cue,
        key_set=frozenset(int(j) for j in keys),
        noise=task.noise,
        grids=grids,
    )


@dataclass(frozen=True)
class SweepResult:
    pool_sizes: tuple[int, ...]
    reports: tuple[EvalReport, ...]
    hits: np.ndarray = field(repr=False)  # (tasks, pools) bool

    def per_task_violations(self) -> int:
        """Tasks hit at some pool size but missed at a larger one."""
        bad = 0
        for row in self.hits:
            if any(row[i] and not row[j] for i in range(len(row)) for j in range(i + 1, len(row))):
                bad += 1
        return bad


def sweep_pool_size(
    timeline_tasks: Sequence[TimelineTask],
    scorer: Scorer,
    pool_sizes: Sequence[int] = (16, 32, 128),
    k: int = 4,
    catalog: SignalCatalog | None = None,
    with_features: bool = True,
    seed: int = 0,
) -> SweepResult:
    """Fixed k, growing candidate pool n: how often does the selection hit a
    key segment as the pool densifies over the same timeline?"""
    if not timeline_tasks:
        raise DomainError("no timeline tasks")
    sizes = tuple(sorted(pool_sizes))
    hits = np.zeros((len(timeline_tasks), len(sizes)), dtype=bool)
    reports = []
    for col, n in enumerate(sizes):
        if k > n:
            raise DomainError(f"k={k} exceeds pool size {n}")
        hit_count = 0
        recall_sum = 0.0
        recall_count = 0
        for row, tl in enumerate(timeline_tasks):
            task = materialize_pool(tl, n, catalog, with_features=with_features)
            scores = scorer(task)
            result = nms_greedy(scores, k)
            overlap = len(set(result.selected) & task.key_set)
            hit = overlap > 0
            hits[row, col] = hit
            hit_count += int(hit)
            if task.key_set:
                recall_sum += overlap / len(task.key_set)
                recall_count += 1
        reports.append(
            EvalReport(
                policy="nms-greedy", k=k, n=n, task_count=len(timeline_tasks),
                hit_rate=hit_count / len(timeline_tasks),
                recall=recall_sum / recall_count if recall_count else 0.0,
            )
        )
    return SweepResult(pool_sizes=sizes, reports=tuple(reports), hits=hits)


# -------------------------- real downstream client --------------------------


class HttpVideoQaClient:
    """Sends selected frames plus the question to a real video-QA endpoint
    speaking the same wire protocol as the chat backends. Not exercised in
    CI; provided for users with live endpoints."""

    kind = "http-videoqa"

    def __init__(self, endpoint: str, model: str = "default", timeout: float = 120.0):
        from .backends import HttpChatBackend

        self._backend = HttpChatBackend(endpoint=endpoint, model=model, timeout=timeout)

    def answer(self, question: str, frames: Sequence[TokenGrid]) -> str:
        request = ChatRequest(
            prompt=question,
            images=tuple(ImagePayload(grid=f.grid) for f in frames),
        )
        return self._backend.complete(request).text
