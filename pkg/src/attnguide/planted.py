"""Synthetic corpus with one planted relevant patch per positive page.

Base features live in ``dim_in`` dimensions. Each query draws a concept from
a low-dimensional signal subspace; its tokens are that concept plus noise and
a shared "generic" direction. Every page is isotropic noise, and the top row
of patches carries a strong component along the same generic direction, a
layout hot spot shared by all pages. A query's positive page hides one patch
weakly correlated with the query concept. The generic component lifts the
header patches in every similarity map without helping to rank pages, so
global supervision alone has little reason to move it. The attention target
peaks on the planted patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import downsample, synthesize_attention
from .core import AnnotationSet, Box, MatchKind, PatchGrid, splitmix_normal, splitmix_uniform
from .evaluation import Qrels
from .trainer import Corpus, TrainingInstance


@dataclass(frozen=True)
class PlantedConfig:
    n_pages: int = 200
    n_queries: int = 100
    grid: PatchGrid = PatchGrid(8, 8)
    dim_in: int = 32
    signal_dims: int = 16
    tokens_per_query: int = 6
    generic_tokens: tuple[int, int] = (3, 3)
    signal: float = 3.0
    signal_spread: float = 0.0
    generic: float = 1.0
    header: float = 4.0
    token_noise: float = 0.1
    test_fraction: float = 0.3
    candidates: int = 3
    attention_upsample: int = 2
    attention_background: float = 0.1
    seed: int = 0


class _Stream:
    """Sequential draws from the splitmix stream of one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.k = 0

    def normal(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = splitmix_normal(self.seed + 0x5DEECE66D * (self.k + 1), n).reshape(shape)
        self.k += 1
        return out

    def integers(self, high: int, n: int) -> np.ndarray:
        u = splitmix_uniform(self.seed + 0x5DEECE66D * (self.k + 1), n)
        self.k += 1
        return np.minimum((u * high).astype(np.int64), high - 1)


def _orthonormal(rng: _Stream, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(rows, cols))
    return q[:, :cols]


def make_planted_corpus(cfg: PlantedConfig = PlantedConfig()) -> Corpus:
    if cfg.n_queries > cfg.n_pages:
        raise ValueError("need at least one page per query")
    if cfg.signal_dims + 1 > cfg.dim_in:
        raise ValueError("dim_in too small for the signal and generic directions")
    rng = _Stream(cfg.seed)
    basis = _orthonormal(rng, cfg.dim_in, cfg.signal_dims + 1)
    signal_basis, generic_dir = basis[:, : cfg.signal_dims], basis[:, cfg.signal_dims]
    n_patch = cfg.grid.size
    header_cells = np.arange(cfg.grid.width)

    pages: dict[str, np.ndarray] = {}
    planted_at: dict[str, int] = {}
    concept_of_page: dict[str, np.ndarray] = {}
    positions = cfg.grid.width + rng.integers(n_patch - cfg.grid.width, cfg.n_pages)
    coords = rng.normal(cfg.n_pages, cfg.signal_dims)
    coords /= np.linalg.norm(coords, axis=1, keepdims=True) / np.sqrt(cfg.signal_dims)
    concepts = coords @ signal_basis.T
    strength = cfg.signal * (1.0 + cfg.signal_spread * (2.0 * splitmix_uniform(cfg.seed ^ 0xA5A5, cfg.n_pages) - 1.0))
    for i in range(cfg.n_pages):
        pid = f"p{i:04d}"
        x = rng.normal(n_patch, cfg.dim_in)
        x[header_cells] += cfg.header * generic_dir
        x[positions[i]] += strength[i] * concepts[i]
        pages[pid] = x
        planted_at[pid] = int(positions[i])
        concept_of_page[pid] = concepts[i]

    queries: dict[str, np.ndarray] = {}
    triples = []
    lo, hi = cfg.generic_tokens
    n_generic = lo + rng.integers(hi - lo + 1, cfg.n_queries)
    for i in range(cfg.n_queries):
        qid, pid = f"q{i:04d}", f"p{i:04d}"
        toks = np.tile(concept_of_page[pid], (cfg.tokens_per_query, 1))
        toks[cfg.tokens_per_query - n_generic[i] :] = cfg.generic * generic_dir
        toks = toks + cfg.token_noise * rng.normal(cfg.tokens_per_query, cfg.dim_in)
        queries[qid] = toks
        triples.append((qid, pid, 1))
    qrels = Qrels.from_triples(triples)

    annotations = {}
    targets = {}
    up = cfg.attention_upsample
    high_grid = PatchGrid(cfg.grid.height * up, cfg.grid.width * up)
    for qid, pid, _ in triples:
        r, c = divmod(planted_at[pid], cfg.grid.width)
        ann = AnnotationSet(qid, pid, cfg.grid, (Box(r, c, r, c, MatchKind.IMPLICIT),))
        annotations[(qid, pid)] = ann
        high_ann = AnnotationSet(qid, pid, high_grid, (Box(r * up, c * up, r * up + up - 1, c * up + up - 1, MatchKind.IMPLICIT),))
        high = synthesize_attention(high_ann, peak=1.0, background=cfg.attention_background, seed=cfg.seed * 7919 + int(qid[1:]))
        targets[qid] = downsample(high, cfg.grid)

    qids = sorted(queries)
    n_test = int(round(cfg.test_fraction * len(qids)))
    test = qids[len(qids) - n_test :]
    train_ids = qids[: len(qids) - n_test]
    all_pids = sorted(pages)
    instances = []
    for qid in train_ids:
        pos = qrels.get(qid)
        pid = next(iter(pos))
        picks = rng.integers(len(all_pids), cfg.candidates)
        cand = {all_pids[j]: pages[all_pids[j]] for j in picks if all_pids[j] not in pos}
        cand[pid] = pages[pid]
        instances.append(TrainingInstance(qid, queries[qid], pid, cand, targets[qid]))
    return Corpus(cfg.grid, queries, pages, qrels, instances, test, annotations)
