"""Deterministic hashing tokenizer for question and response text.

No vocabulary file: each whitespace-delimited word is hashed on its UTF-8
bytes into one of `vocab - 1` buckets (id 0 is reserved for padding). The
mapping is stable across processes and platforms, which keeps every run
reproducible without an external tokenizer dependency.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import DomainError

PAD_ID = 0


def hash_token(word: str, vocab: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab - 1)


def tokenize(text: str, vocab: int, max_len: int | None = None) -> tuple[int, ...]:
    """Token ids for `text`. Empty or whitespace-only text yields one pad id."""
    if vocab < 2:
        raise DomainError(f"vocab must be >= 2, got {vocab}")
    words = text.split()
    if not words:
        return (PAD_ID,)
    if max_len is not None:
        words = words[: max(1, max_len)]
    return tuple(hash_token(w, vocab) for w in words)


@dataclass(frozen=True)
class QuestionTokens:
    """Question text with its hashed token ids."""

    text: str
    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.ids) < 1:
            raise DomainError("question must tokenize to at least one id")

    @property
    def length(self) -> int:
        return len(self.ids)


def tokenize_question(text: str, vocab: int, max_len: int | None = None) -> QuestionTokens:
    return QuestionTokens(text=text, ids=tokenize(text, vocab, max_len))
