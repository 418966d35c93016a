"""Pipeline configuration and dataset records.

One JSON config file drives every CLI stage; loading is schema-strict, so a
typo in a key fails fast instead of silently falling back to a default.
Backend secrets never live in the file, only the name of the environment
variable that holds them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError, DomainError
from .pseudolabel import DEFAULT_CAPTION_PROMPT, DEFAULT_TEMPORAL_WANT
from .selector import SelectorConfig


def _strict_build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        target = _NESTED.get((cls, name))
        if target is not None and value is not None:
            kwargs[name] = _strict_build(target, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock-deterministic"
    endpoint: str = ""
    model: str = "default"
    api_key_env: str = ""
    seed: int = 0
    catalog_seed: int = 7
    noncompliant_fraction: float = 0.0
    top_logprobs: int = 5
    max_retries: int = 3
    timeout_s: float = 60.0

    def __post_init__(self) -> None:
        if self.kind not in ("mock-deterministic", "http-chat"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http-chat" and not self.endpoint:
            raise ConfigError("http-chat backend needs an endpoint")
        if not 0.0 <= self.noncompliant_fraction <= 1.0:
            raise ConfigError("noncompliant_fraction must be in [0, 1]")


@dataclass(frozen=True)
class SelectionCfg:
    k: int = 8
    policy: str = "nms-greedy"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.policy not in ("nms-greedy", "topk", "uniform", "random"):
            raise ConfigError(f"unknown policy {self.policy!r}")


@dataclass(frozen=True)
class LabelerCfg:
    caption_prompt: str = DEFAULT_CAPTION_PROMPT
    want: int = DEFAULT_TEMPORAL_WANT
    max_in_flight: int = 1

    def __post_init__(self) -> None:
        if self.want < 1 or self.max_in_flight < 1:
            raise ConfigError("want and max_in_flight must be >= 1")


@dataclass(frozen=True)
class PathsCfg:
    cache: str = ""
    out_dir: str = "."
    checkpoints: str = "checkpoints"


@dataclass(frozen=True)
class PipelineConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    selection: SelectionCfg = field(default_factory=SelectionCfg)
    labeler: LabelerCfg = field(default_factory=LabelerCfg)
    paths: PathsCfg = field(default_factory=PathsCfg)
    seed: int = 0
    parallelism: int = 1

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")

    def to_dict(self) -> dict:
        def undata(obj):
            if is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: undata(getattr(obj, f.name)) for f in fields(obj)}
            return obj

        return undata(self)

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


_NESTED = {
    (PipelineConfig, "backend"): BackendConfig,
    (PipelineConfig, "selector"): SelectorConfig,
    (PipelineConfig, "selection"): SelectionCfg,
    (PipelineConfig, "labeler"): LabelerCfg,
    (PipelineConfig, "paths"): PathsCfg,
}


def config_from_dict(data: dict) -> PipelineConfig:
    return _strict_build(PipelineConfig, data, "config")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    return config_from_dict(data)


# -------------------------- dataset records --------------------------


@dataclass(frozen=True)
class DatasetRecord:
    """One (video, question) pair plus where its frames come from.

    frame_source is either {"kind": "fixture", "path": ...} pointing at a
    feature fixture file, or {"kind": "synthetic", ...generator fields...}
    from which grids are regenerated on demand.
    """

    video_id: str
    question_id: str
    question: str
    n: int
    frame_source: dict
    answer: str | None = None
    options: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        if self.frame_source.get("kind") not in ("fixture", "synthetic"):
            raise DomainError(
                f"frame_source.kind must be fixture or synthetic, "
                f"got {self.frame_source.get('kind')!r}"
            )

    def to_record(self) -> dict:
        rec = {
            "video_id": self.video_id,
            "question_id": self.question_id,
            "question": self.question,
            "n": self.n,
            "frame_source": self.frame_source,
        }
        if self.answer is not None:
            rec["answer"] = self.answer
        if self.options is not None:
            rec["options"] = list(self.options)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "DatasetRecord":
        return cls(
            video_id=rec["video_id"],
            question_id=rec["question_id"],
            question=rec["question"],
            n=int(rec["n"]),
            frame_source=rec["frame_source"],
            answer=rec.get("answer"),
            options=tuple(rec["options"]) if rec.get("options") else None,
        )


def check_unique_ids(records: list[DatasetRecord], path: str = "") -> None:
    seen: set[tuple[str, str]] = set()
    for rec in records:
        key = (rec.video_id, rec.question_id)
        if key in seen:
            raise DomainError(f"duplicate dataset id {key} in {path}")
        seen.add(key)
