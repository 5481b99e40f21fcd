"""On-disk formats: binary embedding/attention stores and text artifacts.

All binary fields are little-endian; byte layouts are documented in
FORMATS.md. Every writer goes through :func:`atomic_write` (temp file in the
target directory, then ``os.replace``).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    AnnotationSet,
    AttentionMap,
    Box,
    EmbeddingMatrix,
    Kind,
    MatchKind,
    PatchGrid,
    Provenance,
    validate,
)
from .evaluation import Qrels, RunFile

__all__ = [
    "AttentionStore",
    "EmbeddingStore",
    "StoreError",
    "atomic_write",
    "canonical_json",
    "read_annotations",
    "read_attention_store",
    "read_embedding_store",
    "read_qrels",
    "read_run",
    "write_annotations",
    "write_attention_store",
    "write_embedding_store",
    "write_json",
    "write_qrels",
    "write_run",
]

EMB_MAGIC = b"MVE1"
ATT_MAGIC = b"ATT1"
VERSION = 1

_EMB_HEADER = struct.Struct("<4sHIBQ")  # magic, version, dim, normalized, count
_ATT_HEADER = struct.Struct("<4sHQ")  # magic, version, count


class StoreError(ValueError):
    """Base class for malformed store files. ``code`` is stable and distinct."""

    code = "store-error"

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        super().__init__(message)


class MagicMismatch(StoreError):
    code = "magic-mismatch"


class UnsupportedVersion(StoreError):
    code = "unsupported-version"


class Truncated(StoreError):
    code = "truncated"


class DuplicateId(StoreError):
    code = "duplicate-id"


class InvalidRecord(StoreError):
    code = "invalid-record"


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0
        self.record: int | None = None

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            where = "header" if self.record is None else f"record {self.record}"
            raise Truncated(f"file truncated in {where} (need {n} bytes at offset {self.pos})", self.record)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidRecord(f"record {self.record}: id is not UTF-8 ({exc})", self.record) from None


def _pack_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for a u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


# ---------------------------------------------------------------------------
# Embedding store
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingStore:
    dim: int
    normalized: bool
    matrices: list[EmbeddingMatrix]

    def by_id(self) -> dict[str, EmbeddingMatrix]:
        return {m.id: m for m in self.matrices}


def encode_embedding_store(matrices: Sequence[EmbeddingMatrix], dim: int | None = None, normalized: bool | None = None) -> bytes:
    matrices = list(matrices)
    if dim is None:
        if not matrices:
            raise ValueError("dim is required for an empty store")
        dim = matrices[0].dim
    if normalized is None:
        normalized = bool(matrices) and all(m.normalized for m in matrices)
    seen = set()
    parts = [_EMB_HEADER.pack(EMB_MAGIC, VERSION, dim, int(normalized), len(matrices))]
    for i, m in enumerate(matrices):
        errs = validate(m)
        if errs:
            raise InvalidRecord(f"record {i} ({m.id!r}): {'; '.join(errs)}", i)
        if m.dim != dim:
            raise InvalidRecord(f"record {i} ({m.id!r}): dim {m.dim} != store dim {dim}", i)
        if m.normalized != normalized:
            raise InvalidRecord(f"record {i} ({m.id!r}): normalized flag differs from the store's", i)
        if m.id in seen:
            raise DuplicateId(f"record {i}: duplicate id {m.id!r}", i)
        seen.add(m.id)
        parts.append(_pack_string(m.id))
        parts.append(struct.pack("<I", m.rows))
        parts.append(m.data.astype("<f4").tobytes())
    return b"".join(parts)


def decode_embedding_store(buf: bytes, kind: Kind = Kind.PAGE) -> EmbeddingStore:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != EMB_MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
    r.pos = 0
    _, version, dim, flag, count = r.unpack(_EMB_HEADER.format)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if flag not in (0, 1):
        raise InvalidRecord(f"normalized flag must be 0 or 1, got {flag}")
    matrices = []
    seen = set()
    for i in range(count):
        r.record = i
        mid = r.string()
        (rows,) = r.unpack("<I")
        data = np.frombuffer(r.take(4 * rows * dim), dtype="<f4").reshape(rows, dim)
        if mid in seen:
            raise DuplicateId(f"record {i}: duplicate id {mid!r}", i)
        seen.add(mid)
        matrices.append(EmbeddingMatrix(mid, data, kind=kind, normalized=bool(flag)))
    if r.pos != len(buf):
        raise InvalidRecord(f"{len(buf) - r.pos} trailing bytes after {count} records")
    return EmbeddingStore(dim, bool(flag), matrices)


def write_embedding_store(path, matrices: Sequence[EmbeddingMatrix], dim: int | None = None, normalized: bool | None = None) -> None:
    atomic_write(path, encode_embedding_store(matrices, dim, normalized))


def read_embedding_store(path, kind: Kind = Kind.PAGE) -> EmbeddingStore:
    return decode_embedding_store(Path(path).read_bytes(), kind)


# ---------------------------------------------------------------------------
# Attention store
# ---------------------------------------------------------------------------


@dataclass
class AttentionStore:
    maps: list[AttentionMap]


def encode_attention_store(maps: Sequence[AttentionMap]) -> bytes:
    maps = list(maps)
    parts = [_ATT_HEADER.pack(ATT_MAGIC, VERSION, len(maps))]
    for i, m in enumerate(maps):
        errs = validate(m.quantized())
        if errs:
            raise InvalidRecord(f"record {i} ({m.query_id!r}, {m.page_id!r}): {'; '.join(errs)}", i)
        if m.grid.height > 0xFFFF or m.grid.width > 0xFFFF:
            raise InvalidRecord(f"record {i}: grid {m.grid} exceeds u16", i)
        parts.append(_pack_string(m.query_id))
        parts.append(_pack_string(m.page_id))
        parts.append(struct.pack("<BHH", int(m.provenance), m.grid.height, m.grid.width))
        parts.append(m.values.astype("<f4").tobytes())
        parts.append(_pack_string(canonical_json(m.metadata)))
    return b"".join(parts)


def decode_attention_store(buf: bytes) -> AttentionStore:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != ATT_MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}, expected {ATT_MAGIC!r}")
    r.pos = 0
    _, version, count = r.unpack(_ATT_HEADER.format)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    maps = []
    for i in range(count):
        r.record = i
        qid = r.string()
        pid = r.string()
        code, h, w = r.unpack("<BHH")
        try:
            prov = Provenance(code)
        except ValueError:
            raise InvalidRecord(f"record {i}: unknown provenance code {code}", i) from None
        values = np.frombuffer(r.take(4 * h * w), dtype="<f4").astype(np.float64)
        meta_text = r.string()
        try:
            meta = json.loads(meta_text) if meta_text else {}
        except json.JSONDecodeError as exc:
            raise InvalidRecord(f"record {i}: metadata is not JSON ({exc})", i) from None
        maps.append(AttentionMap(PatchGrid(h, w), values, qid, pid, prov, meta))
    if r.pos != len(buf):
        raise InvalidRecord(f"{len(buf) - r.pos} trailing bytes after {count} records")
    return AttentionStore(maps)


def write_attention_store(path, maps: Sequence[AttentionMap]) -> None:
    atomic_write(path, encode_attention_store(maps))


def read_attention_store(path) -> AttentionStore:
    return decode_attention_store(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Text artifacts
# ---------------------------------------------------------------------------


def annotation_to_dict(a: AnnotationSet) -> dict:
    return {
        "query_id": a.query_id,
        "page_id": a.page_id,
        "grid": {"height": a.grid.height, "width": a.grid.width},
        "boxes": [
            {"r0": b.r0, "c0": b.c0, "r1": b.r1, "c1": b.c1, "match_kind": b.match_kind.value} for b in a.boxes
        ],
    }


def annotation_from_dict(d: dict) -> AnnotationSet:
    grid = PatchGrid(int(d["grid"]["height"]), int(d["grid"]["width"]))
    boxes = tuple(
        Box(int(b["r0"]), int(b["c0"]), int(b["r1"]), int(b["c1"]), MatchKind(b.get("match_kind", "explicit")))
        for b in d.get("boxes", [])
    )
    return AnnotationSet(str(d["query_id"]), str(d["page_id"]), grid, boxes)


def write_annotations(path, annotations: Iterable[AnnotationSet]) -> None:
    write_json(path, [annotation_to_dict(a) for a in annotations])


def read_annotations(path) -> list[AnnotationSet]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [annotation_from_dict(d) for d in data]


def _tsv_rows(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh, delimiter="\t") if row and not row[0].startswith("#")]


def read_qrels(path) -> Qrels:
    triples = []
    for lineno, row in enumerate(_tsv_rows(path), 1):
        if len(row) != 3:
            raise ValueError(f"{path}:{lineno}: expected query_id, page_id, grade")
        triples.append((row[0], row[1], int(row[2])))
    return Qrels.from_triples(triples)


def write_qrels(path, qrels: Qrels) -> None:
    buf = io.StringIO()
    for qid in sorted(qrels.judgments):
        for pid, grade in sorted(qrels.judgments[qid].items()):
            buf.write(f"{qid}\t{pid}\t{grade}\n")
    atomic_write(path, buf.getvalue())


def read_run(path) -> RunFile:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, row in enumerate(_tsv_rows(path), 1):
        if len(row) != 4:
            raise ValueError(f"{path}:{lineno}: expected query_id, page_id, rank, score")
        rows.setdefault(row[0], []).append((int(row[2]), row[1], float(row[3])))
    return RunFile({qid: [(pid, score) for _, pid, score in sorted(r)] for qid, r in rows.items()})


def write_run(path, run: RunFile) -> None:
    buf = io.StringIO()
    for qid in sorted(run.rankings):
        for rank, (pid, score) in enumerate(run.rankings[qid], 1):
            buf.write(f"{qid}\t{pid}\t{rank}\t{float(score)!r}\n")
    atomic_write(path, buf.getvalue())
