"""Frame candidates: dense uniform sampling and spatial pooling of token grids.

A video is represented by its metadata plus a plan of n candidate frame
indices sampled uniformly over the timeline. Each candidate frame becomes a
small g x g grid of d_v-dimensional feature vectors ("tokens"), optionally
average-pooled down from a larger raw grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

DEFAULT_CANDIDATES = 128


@dataclass(frozen=True)
class VideoMeta:
    """Identity and timeline geometry of one video."""

    video_id: str
    total_frames: int
    fps: float = 30.0
    height: int = 224
    width: int = 224

    def __post_init__(self) -> None:
        if self.total_frames < 1:
            raise DomainError(f"total_frames must be >= 1, got {self.total_frames}")
        if not (self.fps > 0 and np.isfinite(self.fps)):
            raise DomainError(f"fps must be positive and finite, got {self.fps}")
        if self.height < 1 or self.width < 1:
            raise DomainError("frame resolution must be positive")

    @property
    def duration_seconds(self) -> float:
        return self.total_frames / self.fps


@dataclass(frozen=True)
class FramePlan:
    """n candidate frame indices, sorted ascending.

    Indices are strictly increasing except when the video is shorter than n
    frames, in which case the tail repeats the last valid index so that
    downstream consumers always see exactly n entries.
    """

    n: int
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError(f"candidate count must be >= 1, got {self.n}")
        if len(self.indices) != self.n:
            raise DomainError(
                f"plan holds {len(self.indices)} indices, expected n={self.n}"
            )
        if any(b < a for a, b in zip(self.indices, self.indices[1:])):
            raise DomainError("plan indices must be sorted ascending")
        if self.indices[0] < 0:
            raise DomainError("plan indices must be non-negative")


def centered_indices(total: int, count: int) -> np.ndarray:
    """floor((j + 0.5) * total / count) for j in 0..count-1, clamped to range.

    Sample points sit at the centers of `count` equal spans of [0, total), so
    neither endpoint of the timeline is favored.
    """
    j = np.arange(count, dtype=np.float64)
    idx = np.floor((j + 0.5) * total / count).astype(np.int64)
    return np.clip(idx, 0, total - 1)


def plan_uniform(meta: VideoMeta, n: int = DEFAULT_CANDIDATES) -> FramePlan:
    """Uniformly sample n candidate frame indices from the video timeline.

    When the video has fewer than n frames, the distinct centered indices are
    padded by repeating the last one so the plan still has width n.
    """
    if n < 1:
        raise DomainError(f"candidate count must be >= 1, got {n}")
    idx = centered_indices(meta.total_frames, n)
    if meta.total_frames < n:
        distinct = np.unique(idx)
        pad = np.full(n - distinct.size, distinct[-1], dtype=np.int64)
        idx = np.concatenate([distinct, pad])
    return FramePlan(n=n, indices=tuple(int(i) for i in idx))


@dataclass(frozen=True)
class TokenGrid:
    """A g x g grid of d_v-dimensional feature vectors for one frame."""

    frame_index: int
    grid: np.ndarray = field(repr=False)  # (g, g, d_v)

    def __post_init__(self) -> None:
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise DomainError(f"grid must be (g, g, d_v), got shape {self.grid.shape}")
        if self.grid.shape[0] < 1:
            raise DomainError("grid side must be >= 1")
        if not np.all(np.isfinite(self.grid)):
            raise DomainError(f"frame {self.frame_index}: grid has non-finite values")

    @property
    def g(self) -> int:
        return self.grid.shape[0]

    @property
    def d_v(self) -> int:
        return self.grid.shape[2]

    @property
    def m(self) -> int:
        """Token count g*g."""
        return self.g * self.g

    def tokens(self) -> np.ndarray:
        """Row-major (m, d_v) view of the grid."""
        return self.grid.reshape(self.m, self.d_v)


def pool_tokens(grid: TokenGrid, g: int) -> TokenGrid:
    """Average-pool a raw token grid down to side g.

    Each output cell is the arithmetic mean of its (g_raw/g)^2 input window,
    computed independently per feature dimension. The raw side must be an
    integer multiple of g; see pad_to_multiple for the non-divisible case.
    """
    if g < 1:
        raise DomainError(f"target side must be >= 1, got {g}")
    g_raw = grid.g
    if g_raw % g != 0:
        raise DomainError(
            f"raw side {g_raw} is not divisible by target side {g}; "
            "pad or crop first (see pad_to_multiple)"
        )
    w = g_raw // g
    pooled = (
        grid.grid.reshape(g, w, g, w, grid.d_v)
        .mean(axis=(1, 3), dtype=np.float64)
        .astype(grid.grid.dtype)
    )
    return TokenGrid(frame_index=grid.frame_index, grid=pooled)


def pad_to_multiple(grid: TokenGrid, g: int) -> TokenGrid:
    """Edge-replicate pad a grid so its side becomes a multiple of g.

    Padding is split evenly between the two borders (extra cell on the
    high side when odd), e.g. 16 -> 18 for g=3 adds one replicated row and
    column on each border.
    """
    if g < 1:
        raise DomainError(f"target side must be >= 1, got {g}")
    pad = (g - grid.g % g) % g
    if pad == 0:
        return grid
    lo = pad // 2
    hi = pad - lo
    padded = np.pad(grid.grid, ((lo, hi), (lo, hi), (0, 0)), mode="edge")
    return TokenGrid(frame_index=grid.frame_index, grid=padded)


class PatchEncoder:
    """Toy deterministic feature extractor: per-patch stats under a fixed
    random projection.

    Splits a frame into g_raw x g_raw patches, takes per-channel mean and
    standard deviation of each patch, and projects those statistics through
    a projection matrix drawn once from the seed. The same (pixels, seed)
    always produces the same grid.
    """

    tag = "toy-patch-encoder"

    def __init__(self, g_raw: int = 16, d_v: int = 16, seed: int = 0, channels: int = 3):
        if g_raw < 1 or d_v < 1:
            raise DomainError("g_raw and d_v must be >= 1")
        self.g_raw = g_raw
        self.d_v = d_v
        self.seed = seed
        self.channels = channels
        rng = np.random.default_rng(np.random.SeedSequence([seed, g_raw, d_v]))
        n_stats = 2 * channels
        self._proj = rng.standard_normal((n_stats, d_v)) / np.sqrt(n_stats)

    def extract(self, pixels: np.ndarray, frame_index: int = 0) -> TokenGrid:
        if pixels.ndim != 3 or pixels.shape[2] != self.channels:
            raise DomainError(
                f"expected (H, W, {self.channels}) pixels, got shape {pixels.shape}"
            )
        h, w = pixels.shape[:2]
        if h < self.g_raw or w < self.g_raw:
            raise DomainError(f"frame {h}x{w} smaller than patch grid {self.g_raw}")
        img = pixels.astype(np.float64)
        ys = np.linspace(0, h, self.g_raw + 1).astype(int)
        xs = np.linspace(0, w, self.g_raw + 1).astype(int)
        grid = np.empty((self.g_raw, self.g_raw, self.d_v), dtype=np.float64)
        for a in range(self.g_raw):
            for b in range(self.g_raw):
                patch = img[ys[a] : ys[a + 1], xs[b] : xs[b + 1]]
                stats = np.concatenate(
                    [patch.mean(axis=(0, 1)), patch.std(axis=(0, 1))]
                )
                grid[a, b] = stats @ self._proj
        return TokenGrid(frame_index=frame_index, grid=grid.astype(np.float32))


class FixtureFeatureSource:
    """Feature extractor backed by precomputed grids keyed on
    (video_id, frame_index)."""

    tag = "fixture-file"

    def __init__(self, grids: dict[tuple[str, int], TokenGrid]):
        if not grids:
            raise DomainError("fixture feature source is empty")
        sample = next(iter(grids.values()))
        self.g_raw = sample.g
        self.d_v = sample.d_v
        self._grids = grids

    def extract(self, video_id: str, frame_index: int) -> TokenGrid:
        key = (video_id, frame_index)
        if key not in self._grids:
            raise DomainError(f"no fixture features for {video_id} frame {frame_index}")
        return self._grids[key]
