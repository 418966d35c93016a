"""Persistence: headered JSONL record files, binary checkpoints, and
feature fixtures.

Every JSONL file starts with a one-line versioned header carrying the
format name, the writing tool's version, the config hash, and the seed, so
any output can be traced back to the exact run that produced it. Writers
emit canonical JSON (sorted keys, fixed separators); reruns with identical
inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import StoreError
from .frames import TokenGrid
from .selector import LoraAdapters, SelectorConfig

FORMAT_VERSION = 1
_HEADER_KEY = "frameselect-format"


def dumps_canonical(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def make_header(kind: str, config_hash: str = "", seed: int | None = None) -> dict:
    return {
        _HEADER_KEY: kind,
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "config_hash": config_hash,
        "seed": seed,
    }


def write_jsonl(
    path: str | Path,
    records: Iterable[dict],
    kind: str,
    config_hash: str = "",
    seed: int | None = None,
) -> int:
    """Write header + records; returns the record count."""
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(make_header(kind, config_hash, seed)) + "\n")
        for rec in records:
            fh.write(dumps_canonical(rec) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path, kind: str | None = None) -> tuple[dict, list[dict]]:
    """Read and validate a headered JSONL file.

    Corrupt lines are reported with their byte offset; a header from a
    different format version raises an explicit migration error.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw.strip():
        raise StoreError(f"{path}: empty file, expected a header line")
    records: list[dict] = []
    header: dict | None = None
    offset = 0
    for line in raw.split(b"\n"):
        if line.strip():
            try:
                obj = json.loads(line.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as err:
                raise StoreError(
                    f"{path}: corrupt record at byte offset {offset}: {err}"
                ) from err
            if header is None:
                if _HEADER_KEY not in obj:
                    raise StoreError(f"{path}: first line is not a header")
                if obj.get("version") != FORMAT_VERSION:
                    raise StoreError(
                        f"{path}: format version {obj.get('version')} needs migration "
                        f"(reader supports {FORMAT_VERSION})"
                    )
                if kind is not None and obj.get(_HEADER_KEY) != kind:
                    raise StoreError(
                        f"{path}: holds {obj.get(_HEADER_KEY)!r} records, expected {kind!r}"
                    )
                header = obj
            else:
                records.append(obj)
        offset += len(line) + 1
    assert header is not None
    return header, records


# -------------------------- checkpoints --------------------------

_CKPT_MAGIC = b"FSCKPT01"


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    config: SelectorConfig,
    seed: int,
    adapters: LoraAdapters | None = None,
) -> None:
    """Binary checkpoint: magic, JSON header, then raw little-endian float32
    tensor data in header order."""
    names = sorted(params)
    header: dict = {
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "config": config.to_dict(),
        "seed": seed,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "adapters": None,
    }
    if adapters is not None:
        anames = sorted(adapters.tensors)
        header["adapters"] = {
            "rank": adapters.rank,
            "alpha": adapters.alpha,
            "tensors": [{"name": n, "shape": list(adapters.tensors[n].shape)} for n in anames],
        }
    blob = dumps_canonical(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
        if adapters is not None:
            for n in sorted(adapters.tensors):
                fh.write(np.ascontiguousarray(adapters.tensors[n], dtype="<f4").tobytes())


def load_checkpoint(
    path: str | Path, dtype=np.float64
) -> tuple[dict[str, np.ndarray], SelectorConfig, int, LoraAdapters | None]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise StoreError(f"{path}: not a selector checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise StoreError(
                f"{path}: checkpoint version {header.get('version')} needs migration"
            )
        config = SelectorConfig.from_dict(header["config"])

        def read_tensors(specs) -> dict[str, np.ndarray]:
            out = {}
            for spec in specs:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise StoreError(f"{path}: truncated tensor {spec['name']}")
                out[spec["name"]] = (
                    np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)
                )
            return out

        params = read_tensors(header["tensors"])
        adapters = None
        if header.get("adapters"):
            a = header["adapters"]
            adapters = LoraAdapters(
                rank=int(a["rank"]), alpha=float(a["alpha"]),
                tensors=read_tensors(a["tensors"]),
            )
    return params, config, int(header["seed"]), adapters


# -------------------------- feature fixtures --------------------------

_FIXTURE_MAGIC = b"FSFEAT01"


def write_feature_fixture(
    path: str | Path, entries: Iterable[tuple[str, TokenGrid]]
) -> int:
    """Length-prefixed binary fixture: per frame a JSON meta blob
    {video_id, frame_index, g, d_v} then row-major float32 grid values."""
    count = 0
    with Path(path).open("wb") as fh:
        fh.write(_FIXTURE_MAGIC)
        for video_id, grid in entries:
            meta = dumps_canonical(
                {
                    "video_id": video_id,
                    "frame_index": grid.frame_index,
                    "g": grid.g,
                    "d_v": grid.d_v,
                }
            ).encode("utf-8")
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
            fh.write(np.ascontiguousarray(grid.grid, dtype="<f4").tobytes())
            count += 1
    return count


def read_feature_fixture(path: str | Path) -> dict[tuple[str, int], TokenGrid]:
    path = Path(path)
    out: dict[tuple[str, int], TokenGrid] = {}
    with path.open("rb") as fh:
        magic = fh.read(len(_FIXTURE_MAGIC))
        if magic != _FIXTURE_MAGIC:
            raise StoreError(f"{path}: not a feature fixture (bad magic {magic!r})")
        while True:
            offset = fh.tell()
            lenbuf = fh.read(4)
            if not lenbuf:
                break
            if len(lenbuf) != 4:
                raise StoreError(f"{path}: truncated length prefix at byte {offset}")
            (mlen,) = struct.unpack("<I", lenbuf)
            mbuf = fh.read(mlen)
            if len(mbuf) != mlen:
                raise StoreError(f"{path}: truncated metadata at byte {offset}")
            try:
                meta = json.loads(mbuf.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as err:
                raise StoreError(f"{path}: corrupt metadata at byte {offset}: {err}") from err
            g, d_v = int(meta["g"]), int(meta["d_v"])
            nbytes = 4 * g * g * d_v
            data = fh.read(nbytes)
            if len(data) != nbytes:
                raise StoreError(f"{path}: truncated grid data at byte {offset}")
            grid = TokenGrid(
                frame_index=int(meta["frame_index"]),
                grid=np.frombuffer(data, dtype="<f4").reshape(g, g, d_v),
            )
            out[(meta["video_id"], grid.frame_index)] = grid
    return out


# -------------------------- record codecs --------------------------


def selection_record(
    video_id: str, question_id: str, result, fallback: bool | None = None
) -> dict:
    return {
        "video_id": video_id,
        "question_id": question_id,
        "policy": result.policy,
        "k": result.k,
        "delta": result.delta,
        "selected": list(result.selected),
        "fallback": result.fallback if fallback is None else fallback,
    }


def label_record_to_dict(rec) -> dict:
    return {
        "video_id": rec.video_id,
        "question_id": rec.question_id,
        "spatial": list(rec.spatial),
        "temporal": list(rec.temporal),
        "fused": list(rec.fused),
    }


def label_record_from_dict(data: dict):
    from .pseudolabel import PseudoLabelRecord

    return PseudoLabelRecord(
        video_id=data["video_id"],
        question_id=data["question_id"],
        spatial=tuple(data["spatial"]),
        temporal=tuple(data["temporal"]),
        fused=tuple(data["fused"]),
    )
