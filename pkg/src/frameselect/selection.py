"""Frame selection policies: greedy NMS, top-k, uniform, and random.

The central policy is greedy non-maximum suppression over an importance
vector: repeatedly take the highest-scoring remaining frame, then knock out
its temporal neighbors within a gap delta = floor(n / 4k) so the k picks
spread over distinct moments instead of clustering around one peak.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .frames import centered_indices

PROVENANCES = ("selector", "spatial-label", "temporal-label", "fused", "clip-sim", "oracle")
POLICIES = ("nms-greedy", "topk", "uniform", "random")

# Reserved suppression sentinel; input scores are clamped to [0, 1] so the
# sentinel can never collide with a real score.
SUPPRESSED = -1.0


@dataclass(frozen=True)
class ImportanceVector:
    """Per-frame relevance scores with their provenance.

    Scores are nominally in [0, 1]; values in [-1, 1] are tolerated on input
    and clamped to [0, 1] before selection.
    """

    scores: tuple[float, ...]
    provenance: str = "selector"

    def __post_init__(self) -> None:
        if len(self.scores) < 1:
            raise DomainError("importance vector must have at least one score")
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown provenance {self.provenance!r}")
        arr = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("importance scores must be finite")
        if arr.min() < -1.0 or arr.max() > 1.0:
            raise DomainError("importance scores must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return len(self.scores)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=np.float64)


@dataclass(frozen=True)
class SelectionResult:
    """k distinct selected indices, sorted ascending."""

    selected: tuple[int, ...]
    k: int
    delta: int
    policy: str
    fallback: bool = False

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise DomainError(f"unknown policy {self.policy!r}")
        if len(self.selected) != self.k:
            raise DomainError(f"expected {self.k} indices, got {len(self.selected)}")
        if len(set(self.selected)) != len(self.selected):
            raise DomainError("selected indices must be distinct")
        if any(b < a for a, b in zip(self.selected, self.selected[1:])):
            raise DomainError("selected indices must be sorted")


def _scores_array(scores: ImportanceVector | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(scores, ImportanceVector):
        return scores.as_array()
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise DomainError(f"scores must be a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("importance scores must be finite")
    return arr


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise DomainError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")


def suppression_gap(n: int, k: int) -> int:
    """Neighbor gap delta = floor(n / (4 k)); 0 means self-only suppression."""
    return n // (4 * k)


def nms_greedy(
    scores: ImportanceVector | Sequence[float] | np.ndarray,
    k: int,
    delta: int | None = None,
) -> SelectionResult:
    """Select k frames by greedy argmax with neighbor suppression.

    Each round picks the highest remaining score (ties resolved toward the
    lowest index), then overwrites scores of every frame j with
    |i - j| <= delta by the sentinel. If all scores are suppressed before k
    picks are made, the remaining slots are filled with the lowest-index
    unselected frames and the result is flagged `fallback`. Under the
    default gap floor(n / 4k) exhaustion is unreachable (k picks suppress at
    most n/2 + k < n entries whenever delta >= 1); the override exists for
    experiments with wider gaps, where the fallback keeps the output width
    fixed at k.
    """
    s = _scores_array(scores)
    n = s.size
    _check_k(k, n)
    if delta is None:
        delta = suppression_gap(n, k)
    elif delta < 0:
        raise DomainError(f"delta must be >= 0, got {delta}")
    work = np.clip(s, 0.0, 1.0)
    picked: list[int] = []
    picked_set: set[int] = set()
    fallback = False
    for _ in range(k):
        i = int(np.argmax(work))
        if work[i] == SUPPRESSED:
            fallback = True
            i = min(j for j in range(n) if j not in picked_set)
        picked.append(i)
        picked_set.add(i)
        lo = max(0, i - delta)
        hi = min(n - 1, i + delta)
        work[lo : hi + 1] = SUPPRESSED
    return SelectionResult(
        selected=tuple(sorted(picked)),
        k=k,
        delta=delta,
        policy="nms-greedy",
        fallback=fallback,
    )


def topk(scores: ImportanceVector | Sequence[float] | np.ndarray, k: int) -> SelectionResult:
    """The k largest scores, ties resolved toward the lowest index."""
    s = _scores_array(scores)
    _check_k(k, s.size)
    order = np.argsort(-s, kind="stable")
    chosen = sorted(int(i) for i in order[:k])
    return SelectionResult(
        selected=tuple(chosen), k=k, delta=0, policy="topk"
    )


def uniform_k(n: int, k: int) -> SelectionResult:
    """Centered uniform subsample of the candidate index range [0, n-1]."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    _check_k(k, n)
    idx = centered_indices(n, k)
    return SelectionResult(
        selected=tuple(int(i) for i in idx), k=k, delta=0, policy="uniform"
    )


def random_k(n: int, k: int, rng: np.random.Generator) -> SelectionResult:
    """k distinct indices drawn without replacement."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    _check_k(k, n)
    chosen = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    return SelectionResult(
        selected=tuple(chosen), k=k, delta=0, policy="random"
    )
