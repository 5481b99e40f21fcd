"""Dataset manifest: one JSON document tying stores, qrels and instances together.

Paths inside a manifest are relative to the manifest's own directory. Query
and page base features live in embedding stores; attention targets in an
attention store keyed by (query_id, page_id). Every referenced id must
resolve when the manifest is loaded.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .core import EmbeddingMatrix, Kind, PatchGrid
from .storage import (
    read_annotations,
    read_attention_store,
    read_embedding_store,
    read_qrels,
    write_annotations,
    write_attention_store,
    write_embedding_store,
    write_json,
    write_qrels,
)
from .trainer import Corpus, TrainingInstance

__all__ = ["DatasetError", "MANIFEST_VERSION", "load_manifest", "save_manifest"]

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def save_manifest(corpus: Corpus, directory, name: str = "manifest.json") -> Path:
    """Write ``corpus`` as stores plus a manifest under ``directory``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    queries = [EmbeddingMatrix(q, corpus.query_features[q], Kind.QUERY) for q in sorted(corpus.query_features)]
    pages = [EmbeddingMatrix(p, corpus.page_features[p], Kind.PAGE) for p in sorted(corpus.page_features)]
    write_embedding_store(root / "queries.mve", queries)
    write_embedding_store(root / "pages.mve", pages)
    write_qrels(root / "qrels.tsv", corpus.qrels)

    # targets are keyed by the instance they supervise
    targets = [
        replace(inst.attention_target, query_id=inst.query_id, page_id=inst.positive_id)
        for inst in corpus.train
        if inst.attention_target is not None
    ]
    manifest = {
        "version": MANIFEST_VERSION,
        "grid": str(corpus.grid),
        "query_store": "queries.mve",
        "page_store": "pages.mve",
        "qrels": "qrels.tsv",
        "attention_store": None,
        "annotations": None,
        "instances": [],
        "test_queries": list(corpus.test_queries),
    }
    if targets:
        write_attention_store(root / "targets.att", targets)
        manifest["attention_store"] = "targets.att"
    if corpus.annotations:
        write_annotations(root / "annotations.json", [corpus.annotations[k] for k in sorted(corpus.annotations)])
        manifest["annotations"] = "annotations.json"
    for inst in corpus.train:
        manifest["instances"].append(
            {
                "query_id": inst.query_id,
                "positive": inst.positive_id,
                "candidates": sorted(inst.page_features),
                "attention": [inst.query_id, inst.positive_id] if inst.attention_target is not None else None,
            }
        )
    path = root / name
    write_json(path, manifest)
    return path


def load_manifest(path) -> Corpus:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError([f"manifest is not JSON: {exc}"]) from None
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError([f"unsupported manifest version {doc.get('version')!r}"])
    missing = [k for k in ("grid", "query_store", "page_store", "qrels", "instances") if k not in doc]
    if missing:
        raise DatasetError([f"missing field {k!r}" for k in missing])
    root = path.parent
    grid = PatchGrid.parse(doc["grid"])
    queries = {m.id: m.as_float64() for m in read_embedding_store(root / doc["query_store"], Kind.QUERY).matrices}
    pages = {m.id: m.as_float64() for m in read_embedding_store(root / doc["page_store"], Kind.PAGE).matrices}
    qrels = read_qrels(root / doc["qrels"])
    targets = {}
    if doc.get("attention_store"):
        targets = {(m.query_id, m.page_id): m for m in read_attention_store(root / doc["attention_store"]).maps}
    annotations = {}
    if doc.get("annotations"):
        annotations = {(a.query_id, a.page_id): a for a in read_annotations(root / doc["annotations"])}

    problems = []
    for pid, x in pages.items():
        if x.shape[0] != grid.size:
            problems.append(f"page {pid!r} has {x.shape[0]} patches, grid {grid} needs {grid.size}")
    instances = []
    for i, rec in enumerate(doc["instances"]):
        qid, pos = rec.get("query_id"), rec.get("positive")
        cands = list(rec.get("candidates", []))
        if pos not in cands:
            cands.append(pos)
        bad = [c for c in cands if c not in pages]
        if qid not in queries:
            problems.append(f"instance {i}: unknown query {qid!r}")
        if bad:
            problems.append(f"instance {i}: unknown pages {bad}")
        ref = rec.get("attention")
        target = None
        if ref is not None:
            target = targets.get(tuple(ref))
            if target is None:
                problems.append(f"instance {i}: attention {ref} not in the attention store")
        if qid in queries and not bad:
            instances.append(TrainingInstance(qid, queries[qid], pos, {c: pages[c] for c in cands}, target))
    test = list(doc.get("test_queries", []))
    problems += [f"test query {q!r} unknown" for q in test if q not in queries]
    if problems:
        raise DatasetError(problems)
    return Corpus(grid, queries, pages, qrels, instances, test, annotations)

