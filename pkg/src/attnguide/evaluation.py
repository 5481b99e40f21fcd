"""Retrieval metrics and map-quality metrics.

nDCG uses linear gain (gain = relevance grade) and a log2(rank + 1)
discount. Only queries present in the run are scored. Queries without
judgments and pages without annotated regions are skipped and counted,
never scored as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .core import AnnotationSet, MatchKind, top_k_indices

__all__ = [
    "CoverageResult",
    "MetricReport",
    "Qrels",
    "RunFile",
    "annotation_iou",
    "coverage_at_kpercent",
    "mean_coverage",
    "ndcg_at_k",
]


class MalformedRunError(ValueError):
    pass


@dataclass
class Qrels:
    """query_id -> {page_id: grade}."""

    judgments: dict[str, dict[str, int]] = field(default_factory=dict)

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, int]]) -> "Qrels":
        out: dict[str, dict[str, int]] = {}
        for qid, pid, grade in triples:
            pages = out.setdefault(qid, {})
            if pid in pages:
                raise ValueError(f"duplicate judgment for ({qid}, {pid})")
            if int(grade) < 1:
                continue
            pages[pid] = int(grade)
        return cls(out)

    def get(self, query_id: str) -> dict[str, int]:
        return self.judgments.get(query_id, {})


@dataclass
class RunFile:
    """query_id -> ranked [(page_id, score)], best first."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def validate(self) -> list[str]:
        errs = []
        for qid, ranked in self.rankings.items():
            ids = [pid for pid, _ in ranked]
            if len(set(ids)) != len(ids):
                errs.append(f"query {qid}: page ids unique")
            scores = [s for _, s in ranked]
            if any(b > a for a, b in zip(scores, scores[1:])):
                errs.append(f"query {qid}: scores non-increasing")
        return errs

    @classmethod
    def from_retrieval(cls, results: Mapping[str, Iterable]) -> "RunFile":
        """Build from ``{query_id: [ScoredPage, ...]}``."""
        return cls({qid: [(sp.page_id, float(sp.score)) for sp in ranked] for qid, ranked in results.items()})


@dataclass
class MetricReport:
    metric: str
    per_query: dict[str, float]
    skipped: list[str]

    @property
    def mean(self) -> float:
        if not self.per_query:
            return float("nan")
        return float(math.fsum(self.per_query.values()) / len(self.per_query))

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "evaluated": len(self.per_query),
            "skipped": len(self.skipped),
            "skipped_ids": list(self.skipped),
            "per_query": dict(sorted(self.per_query.items())),
        }


def _dcg(gains: list[float]) -> float:
    return math.fsum(g / math.log2(r + 2) for r, g in enumerate(gains))


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int) -> MetricReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    errs = run.validate()
    if errs:
        raise MalformedRunError("; ".join(errs))
    per_query: dict[str, float] = {}
    skipped = []
    # like trec_eval's default: only queries present in the run are scored
    for qid in sorted(run.rankings):
        judged = qrels.get(qid)
        if not judged:
            skipped.append(qid)
            continue
        ranked = run.rankings[qid][:k]
        dcg = _dcg([judged.get(pid, 0) for pid, _ in ranked])
        idcg = _dcg(sorted(judged.values(), reverse=True)[:k])
        per_query[qid] = dcg / idcg
    return MetricReport(f"ndcg@{k}", per_query, skipped)


@dataclass(frozen=True)
class CoverageResult:
    overall: float
    explicit: float | None
    implicit: float | None
    top_count: int
    region_size: int


def coverage_at_kpercent(values, annotation: AnnotationSet, k_percent: float) -> CoverageResult | None:
    """Share of annotated patches inside the top-K% of ``values``.

    ``values`` is anything flat-indexable in row-major order (an attention map,
    a similarity vector or a plain array). Returns ``None`` when the
    annotation has no region; per-kind fields are ``None`` when that kind is
    absent.
    """
    flat = np.asarray(getattr(values, "values", values), dtype=np.float64).reshape(-1)
    if flat.size != annotation.grid.size:
        raise ValueError(f"map has {flat.size} patches but annotation grid {annotation.grid} has {annotation.grid.size}")
    region = annotation.patch_set()
    if not region:
        return None
    top = set(int(i) for i in top_k_indices(flat, k_percent))

    def share(r: set[int]) -> float | None:
        return len(top & r) / len(r) if r else None

    return CoverageResult(
        share(region),
        share(annotation.patch_set(MatchKind.EXPLICIT)),
        share(annotation.patch_set(MatchKind.IMPLICIT)),
        len(top),
        len(region),
    )


def mean_coverage(
    maps: Mapping[tuple[str, str], object],
    annotations: Iterable[AnnotationSet],
    k_percent: float,
) -> MetricReport:
    """Coverage averaged over annotations; keys of ``maps`` are (query_id, page_id)."""
    per_query: dict[str, float] = {}
    skipped = []
    for ann in annotations:
        key = (ann.query_id, ann.page_id)
        label = f"{ann.query_id}/{ann.page_id}"
        result = coverage_at_kpercent(maps[key], ann, k_percent) if key in maps else None
        if result is None:
            skipped.append(label)
        else:
            per_query[label] = result.overall
    return MetricReport(f"coverage@{k_percent:g}%", per_query, skipped)


def annotation_iou(a: AnnotationSet, b: AnnotationSet) -> float:
    """Patch-level IoU of two rasterized box sets; two empty sets score 1."""
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    sa, sb = a.patch_set(), b.patch_set()
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)
