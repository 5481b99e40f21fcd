"""MaxSim late-interaction scoring and patch-level similarity.

    score(q, d) = sum_i max_j <E_q[i], E_d[j]>
    s_j         = mean_i <E_q[i], E_d[j]>

Both are brute force over contiguous arrays, accumulated in float64.
Argmax ties go to the lowest patch index (what ``np.argmax`` does), which
keeps the MaxSim subgradient used in training deterministic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import AttentionMap, EmbeddingMatrix, Kind, PatchGrid, Provenance

__all__ = [
    "PageIndex",
    "ScoredPage",
    "SimilarityVector",
    "maxsim_score",
    "patch_similarity",
    "retrieve",
    "similarity_map",
]


@dataclass(frozen=True)
class ScoredPage:
    page_id: str
    score: float
    argmax_patch_per_token: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class SimilarityVector:
    page_id: str
    query_id: str
    values: np.ndarray
    grid: PatchGrid | None = None

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", arr)


def _as_array(m: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    if isinstance(m, EmbeddingMatrix):
        return m.as_float64()
    return np.asarray(m, dtype=np.float64)


def _check_pair(query: EmbeddingMatrix | np.ndarray, page: EmbeddingMatrix | np.ndarray) -> None:
    if isinstance(query, EmbeddingMatrix) and query.kind is not Kind.QUERY:
        raise ValueError(f"expected a query matrix, got kind {query.kind.value}")
    if isinstance(page, EmbeddingMatrix) and page.kind is not Kind.PAGE:
        raise ValueError(f"expected a page matrix, got kind {page.kind.value}")
    qd = np.shape(query.data if isinstance(query, EmbeddingMatrix) else query)[-1]
    pd = np.shape(page.data if isinstance(page, EmbeddingMatrix) else page)[-1]
    if qd != pd:
        raise ValueError(f"dimension mismatch: query dim {qd} vs page dim {pd}")


def token_patch_scores(query, page) -> np.ndarray:
    """(N_q, N_d) matrix of token-patch dot products in float64."""
    return _as_array(query) @ _as_array(page).T


def maxsim_score(query: EmbeddingMatrix | np.ndarray, page: EmbeddingMatrix | np.ndarray) -> ScoredPage:
    _check_pair(query, page)
    sims = token_patch_scores(query, page)
    argmax = np.argmax(sims, axis=1)
    best = sims[np.arange(sims.shape[0]), argmax]
    page_id = page.id if isinstance(page, EmbeddingMatrix) else ""
    return ScoredPage(page_id, float(np.sum(best)), tuple(int(j) for j in argmax))


def patch_similarity(
    query: EmbeddingMatrix | np.ndarray,
    page: EmbeddingMatrix | np.ndarray,
    grid: PatchGrid | None = None,
) -> SimilarityVector:
    _check_pair(query, page)
    q = _as_array(query)
    p = _as_array(page)
    values = p @ q.mean(axis=0)
    return SimilarityVector(
        page.id if isinstance(page, EmbeddingMatrix) else "",
        query.id if isinstance(query, EmbeddingMatrix) else "",
        values,
        grid,
    )


def similarity_map(query, page, grid: PatchGrid) -> AttentionMap:
    """Similarity vector laid on ``grid`` and min-max scaled to [0, 1].

    The unscaled values travel in ``metadata["raw"]``. A constant vector has
    no contrast and exports as all zeros.
    """
    n_rows = page.rows if isinstance(page, EmbeddingMatrix) else np.shape(page)[0]
    if grid.size != n_rows:
        raise ValueError(f"grid {grid} has {grid.size} cells but the page has {n_rows} patches")
    sim = patch_similarity(query, page, grid)
    raw = sim.values
    lo, hi = float(raw.min()), float(raw.max())
    scaled = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return AttentionMap(
        grid,
        scaled,
        query_id=sim.query_id,
        page_id=sim.page_id,
        provenance=Provenance.RETRIEVER,
        metadata={"retriever_map": True, "raw": [float(x) for x in raw]},
    )


@dataclass(frozen=True)
class PageIndex:
    """Immutable collection of page matrices scored by brute-force MaxSim."""

    pages: tuple[EmbeddingMatrix, ...]
    _by_id: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pages = tuple(self.pages)
        if not pages:
            raise ValueError("index is empty")
        dims = {p.dim for p in pages}
        if len(dims) != 1:
            raise ValueError(f"index pages disagree on dim: {sorted(dims)}")
        object.__setattr__(self, "pages", pages)
        object.__setattr__(self, "_by_id", {p.id: i for i, p in enumerate(pages)})

    @classmethod
    def build(cls, pages: Iterable[EmbeddingMatrix]) -> "PageIndex":
        return cls(tuple(pages))

    def __len__(self) -> int:
        return len(self.pages)

    def __getitem__(self, page_id: str) -> EmbeddingMatrix:
        return self.pages[self._by_id[page_id]]

    def scores(self, query: EmbeddingMatrix | np.ndarray, workers: int = 1) -> list[ScoredPage]:
        """MaxSim against every page, in index order."""
        q = _as_array(query)
        if workers <= 1:
            return [maxsim_score(q, p) for p in self.pages]
        # numpy releases the GIL inside the matmul; per-page results do not
        # depend on scheduling.
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda p: maxsim_score(q, p), self.pages))

    def retrieve(self, query: EmbeddingMatrix | np.ndarray, k: int, workers: int = 1) -> list[ScoredPage]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if isinstance(query, EmbeddingMatrix) and query.kind is not Kind.QUERY:
            raise ValueError(f"expected a query matrix, got kind {query.kind.value}")
        scored = self.scores(query, workers=workers)
        scored.sort(key=lambda sp: (-sp.score, sp.page_id))
        return scored[:k]


def retrieve(
    query: EmbeddingMatrix | np.ndarray,
    index: PageIndex | Sequence[EmbeddingMatrix],
    k: int,
    workers: int = 1,
) -> list[ScoredPage]:
    """Top-``k`` pages by MaxSim, descending; equal scores ordered by page id."""
    if not isinstance(index, PageIndex):
        index = PageIndex.build(index)
    return index.retrieve(query, k, workers=workers)
