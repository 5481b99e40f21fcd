"""From raw layer-wise attention to a retriever-grid supervision target.

The default order is: average query tokens per layer, average layers, refine
the aggregated task map against the aggregated general map, then max-pool
down to the retriever grid. Every step is a pure function on
:class:`~attnguide.core.AttentionMap` and can be composed differently (e.g.
refining each layer before aggregation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    AnnotationSet,
    AttentionMap,
    LayerAttentionStack,
    PatchGrid,
    Provenance,
    ValidationError,
    ensure_valid,
    splitmix_uniform,
    validate,
)

__all__ = [
    "RefinementConfig",
    "aggregate_layers",
    "average_query_tokens",
    "downsample",
    "flatten",
    "pool_bounds",
    "refine_pmi",
    "reshape",
    "synthesize_attention",
]

JITTER_FRACTION = 0.01


@dataclass(frozen=True)
class RefinementConfig:
    epsilon: float = 1e-6
    renormalize: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def _mean_of_maps(maps: Sequence[AttentionMap], what: str) -> np.ndarray:
    if not maps:
        raise ValueError(f"no {what} maps to average")
    grids = {m.grid for m in maps}
    if len(grids) != 1:
        raise ValueError(f"{what} maps disagree on grid: {sorted(map(str, grids))}")
    for m in maps:
        ensure_valid(m)
    # fixed summation order: deterministic regardless of caller
    return np.mean(np.stack([m.values for m in maps]), axis=0)


def average_query_tokens(per_token_maps: Sequence[AttentionMap]) -> AttentionMap:
    """Mean over the query tokens' maps for one layer."""
    values = _mean_of_maps(per_token_maps, "token")
    first = per_token_maps[0]
    return AttentionMap(
        first.grid,
        values,
        first.query_id,
        first.page_id,
        Provenance.RAW_LAYERWISE,
        {"tokens": len(per_token_maps)},
    )


def aggregate_layers(stack: LayerAttentionStack) -> AttentionMap:
    """Mean over layers; token maps, when given, are averaged first."""
    errs = validate(stack)
    if errs:
        raise ValidationError(errs)
    if stack.per_token is not None:
        layers = [average_query_tokens(tokens) for tokens in stack.per_token]
    else:
        layers = list(stack.per_layer)
    values = _mean_of_maps(layers, "layer")
    first = layers[0]
    return AttentionMap(
        first.grid,
        values,
        first.query_id,
        first.page_id,
        Provenance.AGGREGATED,
        {"layers": len(layers)},
    )


def refine_pmi(task: AttentionMap, general: AttentionMap, cfg: RefinementConfig = RefinementConfig()) -> AttentionMap:
    """Exponentiated PMI of each patch: ``(task + eps) / (general + eps)``.

    With ``cfg.renormalize`` the ratios are scaled to sum to one. Raw ratios
    are kept under provenance AGGREGATED since they are not a distribution.
    """
    if task.grid != general.grid:
        raise ValueError(f"grid mismatch: task {task.grid} vs general {general.grid}")
    ensure_valid(task)
    ensure_valid(general)
    ratio = (task.values + cfg.epsilon) / (general.values + cfg.epsilon)
    meta = {"epsilon": cfg.epsilon, "renormalized": cfg.renormalize}
    if cfg.renormalize:
        ratio = ratio / np.sum(ratio)
        prov = Provenance.REFINED
    else:
        prov = Provenance.AGGREGATED
        meta["raw_ratio"] = True
    return AttentionMap(task.grid, ratio, task.query_id, task.page_id, prov, meta)


def pool_bounds(src: int, dst: int, i: int) -> tuple[int, int]:
    """Half-open source range ``[floor(i*src/dst), floor((i+1)*src/dst))``."""
    return (i * src) // dst, ((i + 1) * src) // dst


def downsample(high: AttentionMap, target: PatchGrid) -> AttentionMap:
    """Adaptive max pooling from ``high.grid`` onto ``target``."""
    hh, wh = high.grid.height, high.grid.width
    hl, wl = target.height, target.width
    if hl < 1 or wl < 1:
        raise ValueError(f"target grid must be at least 1x1, got {target}")
    if hl > hh or wl > wh:
        raise ValueError(f"target {target} is larger than source {high.grid}")
    ensure_valid(high)
    src = high.as_grid()
    # row pass then column pass; max is separable over a rectangle
    rows = np.empty((hl, wh))
    for i in range(hl):
        u0, u1 = pool_bounds(hh, hl, i)
        rows[i] = src[u0:u1].max(axis=0)
    out = np.empty((hl, wl))
    for j in range(wl):
        v0, v1 = pool_bounds(wh, wl, j)
        out[:, j] = rows[:, v0:v1].max(axis=1)
    meta = {"source_grid": str(high.grid)}
    return AttentionMap(target, out.reshape(-1), high.query_id, high.page_id, Provenance.DOWNSAMPLED, meta)


def flatten(m: AttentionMap) -> np.ndarray:
    return np.array(m.values, dtype=np.float64)


def reshape(values, grid: PatchGrid, **kwargs) -> AttentionMap:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != grid.size:
        raise ValueError(f"{values.size} values do not fill grid {grid}")
    return AttentionMap(grid, values, **kwargs)


def synthesize_attention(annotation: AnnotationSet, peak: float, background: float, seed: int) -> AttentionMap:
    """Stand-in attention map that peaks on the annotated boxes.

    Each cell gets ``background`` (``peak`` inside a box) plus a seeded jitter
    in ``[0, 0.01 * background)``, which breaks ties without reordering box
    cells above background cells.
    """
    if not peak > background >= 0:
        raise ValueError(f"need peak > background >= 0, got peak={peak}, background={background}")
    ensure_valid(annotation)
    n = annotation.grid.size
    values = np.full(n, float(background))
    inside = sorted(annotation.patch_set())
    values[inside] = peak
    values += JITTER_FRACTION * background * splitmix_uniform(seed, n)
    return AttentionMap(
        annotation.grid,
        values,
        annotation.query_id,
        annotation.page_id,
        Provenance.SYNTHETIC,
        {"peak": peak, "background": background, "seed": seed},
    )
