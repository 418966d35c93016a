"""Spatial and temporal pseudo-labels for selector training.

Spatial: every candidate frame is judged independently. The backend is
prompted to reason first and then emit "Evaluation: True" or
"Evaluation: False"; the importance score is the renormalized probability
mass of the True verdict token at the position right after "Evaluation:".
When a reply omits the verdict line, the text "Evaluation: True" is
appended and rescored under teacher forcing.

Temporal: all frames are captioned, the captions are ranked jointly by a
text model that replies with a list of the most helpful frame numbers, and
membership in that list becomes a binary per-frame score.

The training target is the elementwise mean of the max-normalized spatial
vector and the binary temporal vector.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends import (
    ChatBackend,
    ChatRequest,
    ChatResponse,
    ImagePayload,
    ResponseCache,
    cache_key,
    cached_complete,
)
from .errors import ConfigError, DomainError
from .frames import TokenGrid

SPATIAL_PROMPT_TEMPLATE = (
    "The image is a video frame from a video. A question about the video is:\n"
    "{question}\n"
    "Evaluate whether the video frame provides useful information to answer "
    "this question about the video.\n"
    "First explain your reasoning. Then generate a Boolean evaluation of the "
    "frame's usefulness. For example:\n"
    "Evaluation: True"
)

TEMPORAL_PROMPT_TEMPLATE = (
    "I need to answer a question based on a long video. To do this, I have "
    "uniformly sampled {n} frames from the video, each with a corresponding "
    "caption. The question I need to answer is:\n"
    "{question}\n"
    "Below is the list of frames and their captions:\n"
    "{caption_lines}\n"
    "Please provide a list of {want} frames that would be most helpful for "
    "answering this question.\n"
    "Rule: ONLY provide a Python List without extra text."
)

DEFAULT_CAPTION_PROMPT = "Describe this video frame in one concise sentence."

EVALUATION_MARKER = "Evaluation:"
FALLBACK_APPEND = "\nEvaluation: True"
DEFAULT_TEMPORAL_WANT = 8

_VERDICT_RE = re.compile(r"Evaluation:\s*(True|False)")
_BRACKET_RE = re.compile(r"\[(.*?)\]", re.S)
_INT_RE = re.compile(r"\d+")


def build_spatial_prompt(question: str) -> str:
    return SPATIAL_PROMPT_TEMPLATE.format(question=question)


def build_temporal_prompt(question: str, captions: Sequence[str], want: int) -> str:
    lines = "\n".join(f"Frame {i} : {cap}" for i, cap in enumerate(captions, start=1))
    return TEMPORAL_PROMPT_TEMPLATE.format(
        n=len(captions), question=question, caption_lines=lines, want=want
    )


# -------------------------- records --------------------------


@dataclass(frozen=True)
class SpatialLabelRaw:
    """Verdict-token masses for one frame."""

    frame_index: int
    p_true: float
    p_false: float
    fallback_used: bool
    response_text: str

    def __post_init__(self) -> None:
        for name, p in (("p_true", self.p_true), ("p_false", self.p_false)):
            if not 0.0 <= p <= 1.0:
                raise DomainError(f"{name}={p} outside [0, 1]")
        if self.p_true + self.p_false > 1.0 + 1e-9:
            raise DomainError(
                f"verdict masses sum to {self.p_true + self.p_false} > 1"
            )

    @property
    def score(self) -> float:
        return importance_from_probs(self.p_true, self.p_false)


@dataclass(frozen=True)
class TemporalLabel:
    """0-based indices of the frames ranked most helpful."""

    helpful: tuple[int, ...]
    parse_ok: bool
    raw_reply: str = ""

    @property
    def helpful_set(self) -> frozenset[int]:
        return frozenset(self.helpful)


@dataclass(frozen=True)
class PseudoLabelRecord:
    """Fused per-frame training targets for one (video, question) pair."""

    video_id: str
    question_id: str
    spatial: tuple[float, ...]
    temporal: tuple[float, ...]
    fused: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.spatial)
        if not (len(self.temporal) == len(self.fused) == n) or n < 1:
            raise DomainError("spatial/temporal/fused lengths must match and be >= 1")
        for vec in (self.spatial, self.temporal, self.fused):
            arr = np.asarray(vec)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DomainError("label values must lie in [0, 1]")
        expect = (np.asarray(self.spatial) + np.asarray(self.temporal)) / 2.0
        if not np.allclose(expect, self.fused, atol=1e-9):
            raise DomainError("fused vector is not the mean of spatial and temporal")

    @property
    def n(self) -> int:
        return len(self.spatial)


def make_label_record(
    video_id: str,
    question_id: str,
    spatial_raw: Sequence[float],
    temporal: TemporalLabel,
) -> PseudoLabelRecord:
    spatial = normalize_spatial(np.asarray(spatial_raw, dtype=np.float64))
    binary = binarize_temporal(temporal, len(spatial))
    fused = fuse(spatial, binary)
    return PseudoLabelRecord(
        video_id=video_id,
        question_id=question_id,
        spatial=tuple(float(x) for x in spatial),
        temporal=tuple(float(x) for x in binary),
        fused=tuple(float(x) for x in fused),
    )


# -------------------------- scalar ops --------------------------


def importance_from_probs(p_true: float, p_false: float) -> float:
    """p_true / (p_true + p_false); 0.5 when both masses vanish.

    Invariant under common scaling of both masses, so it does not matter how
    much probability the backend leaves on non-verdict tokens.
    """
    total = p_true + p_false
    if total <= 0.0:
        return 0.5
    return p_true / total


def normalize_spatial(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """Divide by the max so the best frame scores exactly 1; the all-zero
    vector stays all-zero."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise DomainError(f"expected a 1-d score vector, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError("raw spatial scores must lie in [0, 1]")
    top = arr.max()
    if top <= 0.0:
        return np.zeros_like(arr)
    return arr / top


def binarize_temporal(label: TemporalLabel, n: int) -> np.ndarray:
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    out = np.zeros(n, dtype=np.float64)
    for i in label.helpful:
        if not 0 <= i < n:
            raise DomainError(f"temporal index {i} outside [0, {n})")
        out[i] = 1.0
    return out


def fuse(spatial: Sequence[float] | np.ndarray, temporal: Sequence[float] | np.ndarray) -> np.ndarray:
    a = np.asarray(spatial, dtype=np.float64)
    b = np.asarray(temporal, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: spatial {a.shape} vs temporal {b.shape}")
    return (a + b) / 2.0


# -------------------------- backend-driven ops --------------------------


def _require_spatial_capable(backend: ChatBackend) -> None:
    if not backend.supports_images:
        raise ConfigError(f"backend {backend.kind} cannot accept images")
    if not backend.supports_token_logprobs:
        raise ConfigError(f"backend {backend.kind} does not expose token logprobs")


def _verdict_position(response: ChatResponse) -> int | None:
    """Index of the token immediately after "Evaluation:", or None."""
    seen = ""
    for i, tok in enumerate(response.tokens):
        if seen.endswith(EVALUATION_MARKER):
            return i
        seen += tok.token
    return None


def _verdict_masses(response: ChatResponse, position: int) -> tuple[float, float]:
    p_true = 0.0
    p_false = 0.0
    for tok, logprob in response.tokens[position].top:
        word = tok.strip().lower().rstrip(".,!")
        if word == "true":
            p_true += float(np.exp(logprob))
        elif word == "false":
            p_false += float(np.exp(logprob))
    return min(p_true, 1.0), min(p_false, 1.0)


def spatial_score_frame(
    backend: ChatBackend,
    frame: TokenGrid,
    question: str,
    video_id: str = "",
    cache: ResponseCache | None = None,
    top_logprobs: int = 5,
) -> SpatialLabelRaw:
    """Judge one frame's usefulness for the question.

    Falls back to appending "Evaluation: True" and rescoring when the reply
    does not contain a verdict line.
    """
    _require_spatial_capable(backend)
    prompt = build_spatial_prompt(question)
    request = ChatRequest(
        prompt=prompt,
        images=(ImagePayload(grid=frame.grid),),
        want_logprobs=True,
        top_logprobs=top_logprobs,
    )
    key = cache_key(video_id, frame.frame_index, question, prompt)
    response = cached_complete(backend, request, cache, key)
    fallback = False
    position = _verdict_position(response)
    if position is None or not _VERDICT_RE.search(response.text):
        fallback = True
        forced = response.text + FALLBACK_APPEND
        forced_request = ChatRequest(
            prompt=prompt,
            images=request.images,
            want_logprobs=True,
            top_logprobs=top_logprobs,
            forced_response=forced,
        )
        forced_key = cache_key(video_id, frame.frame_index, question, prompt, forced)
        response = cached_complete(backend, forced_request, cache, forced_key)
        position = _verdict_position(response)
        if position is None:
            raise DomainError(
                "backend returned no verdict position even under teacher forcing"
            )
    p_true, p_false = _verdict_masses(response, position)
    return SpatialLabelRaw(
        frame_index=frame.frame_index,
        p_true=p_true,
        p_false=p_false,
        fallback_used=fallback,
        response_text=response.text,
    )


def _run_indexed(fn, items, max_in_flight: int):
    if max_in_flight <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(fn, items))


def spatial_score_video(
    backend: ChatBackend,
    frames: Sequence[TokenGrid],
    question: str,
    video_id: str = "",
    cache: ResponseCache | None = None,
    max_in_flight: int = 1,
) -> list[SpatialLabelRaw]:
    """Independent per-frame spatial judgments, order-aligned with `frames`."""
    return _run_indexed(
        lambda f: spatial_score_frame(backend, f, question, video_id, cache),
        list(frames),
        max_in_flight,
    )


def caption_frames(
    backend: ChatBackend,
    frames: Sequence[TokenGrid],
    video_id: str = "",
    cache: ResponseCache | None = None,
    prompt: str = DEFAULT_CAPTION_PROMPT,
    max_in_flight: int = 1,
) -> list[str]:
    """One concise caption per frame; empty captions become "(no caption)"."""
    if not backend.supports_images:
        raise ConfigError(f"backend {backend.kind} cannot accept images")

    def one(frame: TokenGrid) -> str:
        request = ChatRequest(prompt=prompt, images=(ImagePayload(grid=frame.grid),))
        key = cache_key(video_id, frame.frame_index, "", prompt)
        response = cached_complete(backend, request, cache, key)
        return response.text.strip() or "(no caption)"

    return _run_indexed(one, list(frames), max_in_flight)


def parse_frame_list(reply: str, n: int, want: int) -> tuple[tuple[int, ...], bool]:
    """Extract helpful-frame indices from a ranking reply.

    Prefers the first bracketed list; otherwise falls back to scanning the
    whole reply for integers (parse_ok=False). Numbers are 1-based in the
    prompt's enumeration, so they are shifted down; out-of-range values and
    duplicates are dropped and the result is truncated to `want` entries.
    """
    bracket = _BRACKET_RE.search(reply)
    parse_ok = bracket is not None
    source = bracket.group(1) if bracket is not None else reply
    picked: list[int] = []
    seen: set[int] = set()
    for text in _INT_RE.findall(source):
        idx = int(text) - 1
        if 0 <= idx < n and idx not in seen:
            picked.append(idx)
            seen.add(idx)
        if len(picked) >= want:
            break
    return tuple(picked), parse_ok


def temporal_rank(
    backend: ChatBackend,
    captions: Sequence[str],
    question: str,
    want: int = DEFAULT_TEMPORAL_WANT,
    video_id: str = "",
    cache: ResponseCache | None = None,
) -> TemporalLabel:
    """Rank all captioned frames jointly; never aborts on a malformed reply."""
    if want < 1:
        raise DomainError(f"want must be >= 1, got {want}")
    if not captions:
        raise DomainError("temporal ranking needs at least one caption")
    prompt = build_temporal_prompt(question, captions, want)
    request = ChatRequest(prompt=prompt)
    key = cache_key(video_id, "ALL", question, prompt)
    response = cached_complete(backend, request, cache, key)
    helpful, parse_ok = parse_frame_list(response.text, len(captions), want)
    return TemporalLabel(helpful=helpful, parse_ok=parse_ok, raw_reply=response.text)


def label_video(
    backend: ChatBackend,
    frames: Sequence[TokenGrid],
    question: str,
    video_id: str,
    question_id: str,
    want: int = DEFAULT_TEMPORAL_WANT,
    cache: ResponseCache | None = None,
    max_in_flight: int = 1,
) -> PseudoLabelRecord:
    """Full labeling pipeline for one (video, question) pair."""
    raw = spatial_score_video(backend, frames, question, video_id, cache, max_in_flight)
    captions = caption_frames(backend, frames, video_id, cache, max_in_flight=max_in_flight)
    temporal = temporal_rank(backend, captions, question, want, video_id, cache)
    return make_label_record(video_id, question_id, [r.score for r in raw], temporal)
