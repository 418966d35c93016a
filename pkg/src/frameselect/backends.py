"""Chat-model backends for pseudo-label generation.

Two implementations of one interface: a deterministic in-process mock (a
pure function of prompt, images, and seed) and an HTTP client speaking a
chat-completions-style JSON protocol with per-position token logprobs.
Responses can be cached in an append-only JSONL file keyed by
(video_id, frame_index, question hash, prompt hash).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendError, ConfigError, StoreError

_TOKEN_RE = re.compile(r"\s*\S+")


# -------------------------- wire types --------------------------


@dataclass(frozen=True)
class ImagePayload:
    """A frame's feature grid as carried on the wire (float32, base64)."""

    grid: np.ndarray = field(repr=False)  # (g, g, d_v)

    def to_wire(self) -> dict:
        arr = np.ascontiguousarray(self.grid, dtype="<f4")
        return {
            "type": "features_f32_b64",
            "g": int(arr.shape[0]),
            "d_v": int(arr.shape[2]),
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }

    @classmethod
    def from_wire(cls, data: dict) -> "ImagePayload":
        if data.get("type") != "features_f32_b64":
            raise ConfigError(f"unsupported image payload type {data.get('type')!r}")
        g, d_v = int(data["g"]), int(data["d_v"])
        raw = base64.b64decode(data["data"])
        arr = np.frombuffer(raw, dtype="<f4").reshape(g, g, d_v)
        return cls(grid=arr)

    def mean_feature(self) -> np.ndarray:
        return self.grid.reshape(-1, self.grid.shape[-1]).mean(axis=0)


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    logprob: float
    top: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tokens: tuple[TokenLogprob, ...] = ()

    def to_record(self) -> dict:
        return {
            "text": self.text,
            "tokens": [
                {"token": t.token, "logprob": t.logprob, "top": [list(p) for p in t.top]}
                for t in self.tokens
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ChatResponse":
        toks = tuple(
            TokenLogprob(
                token=t["token"],
                logprob=float(t["logprob"]),
                top=tuple((str(a), float(b)) for a, b in t.get("top", [])),
            )
            for t in rec.get("tokens", [])
        )
        return cls(text=rec["text"], tokens=toks)


@dataclass(frozen=True)
class ChatRequest:
    """One chat call. When `forced_response` is set the backend does not
    generate; it scores the given text and returns its token logprobs
    (teacher forcing), which is how a missing Boolean verdict is rescored."""

    prompt: str
    images: tuple[ImagePayload, ...] = ()
    want_logprobs: bool = False
    top_logprobs: int = 5
    max_tokens: int = 256
    forced_response: str | None = None


class ChatBackend(Protocol):
    kind: str
    supports_images: bool
    supports_token_logprobs: bool

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def split_tokens(text: str) -> list[str]:
    """Greedy whitespace-attached tokenization: each token is a run of
    whitespace plus the following word, so concatenation restores the text."""
    return _TOKEN_RE.findall(text)


# -------------------------- deterministic mock --------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def _hash_unit_float(*parts: str) -> float:
    h = hashlib.blake2b("|".join(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


class MockChatBackend:
    """Pure-function stand-in for a multimodal chat model.

    Grounded in a catalog of (cue word, feature direction) pairs: a frame is
    judged relevant to a question when its mean feature vector points along
    the direction of the cue word the question mentions. Captioning reports
    the best-matching cue, and ranking picks the frames whose captions carry
    the question's cue. A configurable fraction of spatial replies omit the
    required verdict line to exercise the caller's rescoring fallback.
    """

    kind = "mock-deterministic"
    supports_images = True
    supports_token_logprobs = True

    def __init__(
        self,
        seed: int = 0,
        catalog: Sequence[tuple[str, np.ndarray]] = (),
        noncompliant_fraction: float = 0.0,
        relevance_threshold: float = 0.45,
    ):
        self.seed = seed
        self.catalog = [(w, _unit(np.asarray(v, dtype=np.float64))) for w, v in catalog]
        self.noncompliant_fraction = noncompliant_fraction
        self.relevance_threshold = relevance_threshold
        self.calls = 0

    # -- internals --

    def _cue_in(self, text: str) -> tuple[str, np.ndarray] | None:
        for word, vec in self.catalog:
            if word in text:
                return word, vec
        return None

    def _relevance(self, image: ImagePayload, question: str, prompt_key: str) -> float:
        cue = self._cue_in(question)
        if cue is None:
            return 0.1 + 0.8 * _hash_unit_float("rel", str(self.seed), prompt_key)
        feat = image.mean_feature().astype(np.float64)
        norm = float(np.linalg.norm(feat))
        if norm == 0.0:
            return 0.5
        return float(np.dot(feat / norm, cue[1]))

    def _true_false_masses(self, corr: float) -> tuple[float, float]:
        # Squash the alignment into verdict-token masses with 2% of the mass
        # reserved for other tokens.
        p_true = 0.98 / (1.0 + math.exp(-8.0 * (corr - self.relevance_threshold)))
        p_true = min(max(p_true, 1e-6), 0.98 - 1e-6)
        return p_true, 0.98 - p_true

    def _is_noncompliant(self, prompt: str) -> bool:
        if self.noncompliant_fraction <= 0.0:
            return False
        return _hash_unit_float("nc", str(self.seed), prompt) < self.noncompliant_fraction

    @staticmethod
    def _plain_tokens(text: str) -> list[TokenLogprob]:
        return [TokenLogprob(token=t, logprob=0.0, top=((t, 0.0),)) for t in split_tokens(text)]

    def _verdict_tokens(self, text: str, p_true: float, p_false: float) -> tuple[TokenLogprob, ...]:
        # Echo the text's own tokens; at the position after "Evaluation:" the
        # top alternatives carry the full verdict distribution.
        tokens: list[TokenLogprob] = []
        seen = ""
        for tok in split_tokens(text):
            if seen.endswith("Evaluation:"):
                top = (
                    (" True", math.log(p_true)),
                    (" False", math.log(p_false)),
                    (" Unclear", math.log(max(1.0 - p_true - p_false, 1e-9))),
                )
                word = tok.strip().lower()
                lp = math.log(p_true) if word == "true" else (
                    math.log(p_false) if word == "false" else 0.0
                )
                tokens.append(TokenLogprob(token=tok, logprob=lp, top=top))
            else:
                tokens.append(TokenLogprob(token=tok, logprob=0.0, top=((tok, 0.0),)))
            seen += tok
        return tuple(tokens)

    # -- protocol --

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        prompt = request.prompt
        if request.forced_response is not None:
            return self._score_forced(request)
        kind = classify_prompt(prompt)
        if kind == "spatial":
            return self._spatial(request)
        if kind == "caption":
            return self._caption(request)
        if kind == "temporal":
            return self._temporal(request)
        # Unknown prompt: deterministic echo-style reply.
        text = "Acknowledged."
        return ChatResponse(text=text, tokens=tuple(self._plain_tokens(text)))

    def _spatial(self, request: ChatRequest) -> ChatResponse:
        if not request.images:
            raise BackendError("spatial evaluation requires an image payload")
        question = extract_question(request.prompt)
        corr = self._relevance(request.images[0], question, request.prompt[:64])
        p_true, p_false = self._true_false_masses(corr)
        relevant = p_true >= p_false
        if self._is_noncompliant(request.prompt):
            text = (
                "The frame may or may not relate to the question; "
                "it is hard to commit to a verdict here."
            )
            return ChatResponse(text=text, tokens=tuple(self._plain_tokens(text)))
        reason = (
            "The frame's content aligns with what the question asks about."
            if relevant
            else "The frame does not show anything the question asks about."
        )
        text = f"{reason}\nEvaluation: {'True' if relevant else 'False'}"
        return ChatResponse(text=text, tokens=self._verdict_tokens(text, p_true, p_false))

    def _score_forced(self, request: ChatRequest) -> ChatResponse:
        question = extract_question(request.prompt)
        if request.images:
            corr = self._relevance(request.images[0], question, request.prompt[:64])
            p_true, p_false = self._true_false_masses(corr)
        else:
            u = _hash_unit_float("forced", str(self.seed), request.prompt[:64])
            p_true, p_false = 0.49 + 0.4 * (u - 0.5), 0.49 - 0.4 * (u - 0.5)
        text = request.forced_response or ""
        return ChatResponse(text=text, tokens=self._verdict_tokens(text, p_true, p_false))

    def _caption(self, request: ChatRequest) -> ChatResponse:
        if not request.images:
            raise BackendError("captioning requires an image payload")
        feat = request.images[0].mean_feature().astype(np.float64)
        norm = float(np.linalg.norm(feat))
        best_word, best_corr = None, -1.0
        if norm > 0:
            for word, vec in self.catalog:
                c = float(np.dot(feat / norm, vec))
                if c > best_corr:
                    best_word, best_corr = word, c
        if best_word is not None and best_corr > self.relevance_threshold:
            text = f"A frame prominently showing the {best_word} moment."
        else:
            text = "An ordinary frame with no salient event."
        return ChatResponse(text=text, tokens=tuple(self._plain_tokens(text)))

    def _temporal(self, request: ChatRequest) -> ChatResponse:
        question = extract_question(request.prompt)
        captions = extract_caption_lines(request.prompt)
        want = extract_want(request.prompt)
        cue = self._cue_in(question)
        helpful: list[int] = []
        if cue is not None:
            helpful = [i for i, cap in captions if cue[0] in cap][:want]
        if self._is_noncompliant(request.prompt):
            if helpful:
                listing = " and ".join(str(i) for i in helpful)
                text = f"The most helpful frames would be {listing}."
            else:
                text = "None of the captions obviously help with this question."
            return ChatResponse(text=text, tokens=tuple(self._plain_tokens(text)))
        text = "[" + ", ".join(str(i) for i in helpful) + "]"
        return ChatResponse(text=text, tokens=tuple(self._plain_tokens(text)))


# Prompt-shape helpers shared by the mock and by tests. The mock recognizes
# the pipeline's own templates; anything else falls through to a generic
# reply.

_QUESTION_AFTER = (
    "A question about the video is:\n",
    "The question I need to answer is:\n",
)
_CAPTION_LINE_RE = re.compile(r"^Frame (\d+) : (.*)$", re.M)
_WANT_RE = re.compile(r"Please provide a list of (\d+) frames")


def classify_prompt(prompt: str) -> str:
    if prompt.startswith("The image is a video frame from a video."):
        return "spatial"
    if prompt.startswith("I need to answer a question based on a long video."):
        return "temporal"
    if prompt.startswith("Describe this video frame"):
        return "caption"
    return "unknown"


def extract_question(prompt: str) -> str:
    for marker in _QUESTION_AFTER:
        if marker in prompt:
            rest = prompt.split(marker, 1)[1]
            return rest.split("\n", 1)[0]
    return ""


def extract_caption_lines(prompt: str) -> list[tuple[int, str]]:
    return [(int(m.group(1)), m.group(2)) for m in _CAPTION_LINE_RE.finditer(prompt)]


def extract_want(prompt: str, default: int = 8) -> int:
    m = _WANT_RE.search(prompt)
    return int(m.group(1)) if m else default


# -------------------------- HTTP backend --------------------------


class HttpChatBackend:
    """Chat-completions-style HTTP client with retries.

    Request JSON:
      {"model": ..., "messages": [{"role": "user", "content":
          [{"type": "text", "text": ...}, <image payload>, ...]}],
       "logprobs": bool, "top_logprobs": int, "max_tokens": int,
       "forced_response": str | null}

    Response JSON must carry {"text": ..., "tokens": [{"token", "logprob",
    "top_logprobs": [{"token", "logprob"}]}]} when logprobs are requested.
    """

    kind = "http-chat"
    supports_images = True
    supports_token_logprobs = True

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        api_key: str | None = None,
    ):
        if not endpoint:
            raise ConfigError("http backend requires an endpoint")
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.api_key = api_key
        self.calls = 0

    def _payload(self, request: ChatRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.prompt}]
        content += [img.to_wire() for img in request.images]
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "logprobs": request.want_logprobs,
            "top_logprobs": request.top_logprobs,
            "max_tokens": request.max_tokens,
            "forced_response": request.forced_response,
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests as _requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = self._payload(request)
        last_err: Exception | None = None
        for attempt in range(self.max_retries):
            self.calls += 1
            try:
                resp = _requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    raise BackendError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise BackendError(f"request rejected: {resp.status_code} {resp.text[:200]}")
                body = resp.json()
                toks = tuple(
                    TokenLogprob(
                        token=t["token"],
                        logprob=float(t["logprob"]),
                        top=tuple(
                            (tt["token"], float(tt["logprob"]))
                            for tt in t.get("top_logprobs", [])
                        ),
                    )
                    for t in body.get("tokens", [])
                )
                return ChatResponse(text=body["text"], tokens=toks)
            except (BackendError, _requests.RequestException, KeyError, ValueError) as err:
                last_err = err
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff_s * (2 ** attempt))
        raise BackendError(f"backend failed after {self.max_retries} attempts: {last_err}")


# -------------------------- response cache --------------------------


def _short_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def cache_key(
    video_id: str,
    frame_index: int | str,
    question: str,
    prompt: str,
    forced_response: str | None = None,
) -> str:
    """Idempotency key for one backend call. frame_index is "ALL" for calls
    covering a whole video (temporal ranking)."""
    prompt_material = prompt if forced_response is None else prompt + "\x00" + forced_response
    return "|".join(
        [video_id, str(frame_index), _short_hash(question), _short_hash(prompt_material)]
    )


class ResponseCache:
    """Append-only JSONL cache of backend responses.

    Concurrent writers may append the same key; on load the last line wins,
    and identical-content duplicates are harmless.
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[str, ChatResponse] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    self._entries[rec["key"]] = ChatResponse.from_record(rec["response"])
                except (json.JSONDecodeError, KeyError) as err:
                    raise StoreError(f"corrupt cache line {lineno} in {self.path}: {err}") from err

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> ChatResponse | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, response: ChatResponse) -> None:
        line = json.dumps(
            {"key": key, "response": response.to_record()},
            ensure_ascii=False, sort_keys=True,
        )
        with self._lock:
            self._entries[key] = response
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


def cached_complete(
    backend: ChatBackend,
    request: ChatRequest,
    cache: ResponseCache | None,
    key: str | None,
) -> ChatResponse:
    """Look up the cache before issuing the call; store fresh responses."""
    if cache is not None and key is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    response = backend.complete(request)
    if cache is not None and key is not None:
        cache.put(key, response)
    return response
