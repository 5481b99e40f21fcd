"""Domain types, invariant checks and the deterministic generator.

Every numeric container here is a frozen dataclass around a numpy array.
Construction never raises on bad data; call :func:`validate` to get the list
of violated invariants, or :func:`ensure_valid` to raise on the first one.

Conventions shared by the whole package:

* patch grids are row-major with the origin at the top-left, so the flat
  index of cell ``(r, c)`` is ``r * width + c``;
* embeddings are held as float32 (the on-disk precision) and every reduction
  is carried out in float64;
* attention values are held as float64 in memory and quantized to float32
  only when written to disk.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "AnnotationSet",
    "AttentionMap",
    "Box",
    "EmbeddingMatrix",
    "Kind",
    "LayerAttentionStack",
    "MatchKind",
    "PatchGrid",
    "Provenance",
    "ValidationError",
    "ensure_valid",
    "seeded_random_matrix",
    "splitmix64",
    "splitmix_normal",
    "splitmix_uniform",
    "top_k_count",
    "top_k_indices",
    "validate",
]

NORM_TOL = 1e-6
SUM_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when an entity breaks one of its invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class Kind(enum.Enum):
    QUERY = "query"
    PAGE = "page"


class Provenance(enum.IntEnum):
    """Where an attention map came from. Values are the on-disk codes."""

    RAW_LAYERWISE = 0
    AGGREGATED = 1
    REFINED = 2
    DOWNSAMPLED = 3
    SYNTHETIC = 4
    RETRIEVER = 5


class MatchKind(enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int

    @property
    def size(self) -> int:
        return self.height * self.width

    @classmethod
    def parse(cls, text: str) -> "PatchGrid":
        """Parse ``"HxW"`` (e.g. ``"24x32"``)."""
        try:
            h, w = text.lower().split("x")
            return cls(int(h), int(w))
        except ValueError:
            raise ValueError(f"grid must look like HxW, got {text!r}") from None

    def __str__(self) -> str:
        return f"{self.height}x{self.width}"


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Multi-vector embedding of one query (tokens) or one page (patches)."""

    id: str
    data: np.ndarray
    kind: Kind = Kind.PAGE
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1] if self.data.ndim == 2 else 0

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.id == other.id
            and self.kind == other.kind
            and self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Non-negative saliency weights over a page's patch grid."""

    grid: PatchGrid
    values: np.ndarray
    query_id: str = ""
    page_id: str = ""
    provenance: Provenance = Provenance.SYNTHETIC
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid.height, self.grid.width)

    def quantized(self) -> "AttentionMap":
        """The same map rounded to float32, i.e. what a store round-trip keeps."""
        return AttentionMap(
            self.grid,
            self.values.astype(np.float32),
            self.query_id,
            self.page_id,
            self.provenance,
            dict(self.metadata),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.query_id == other.query_id
            and self.page_id == other.page_id
            and self.provenance == other.provenance
            and self.metadata == other.metadata
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class LayerAttentionStack:
    """Per-layer maps of one (query, page) pair.

    ``per_token`` optionally holds, for each layer, the maps of each query
    token; when present :func:`attnguide.attention.aggregate_layers` averages
    over tokens first.
    """

    per_layer: tuple[AttentionMap, ...]
    per_token: tuple[tuple[AttentionMap, ...], ...] | None = None

    @property
    def layers(self) -> int:
        return len(self.per_layer)


@dataclass(frozen=True)
class Box:
    """Inclusive rectangle of patch coordinates."""

    r0: int
    c0: int
    r1: int
    c1: int
    match_kind: MatchKind = MatchKind.EXPLICIT

    def cells(self, width: int) -> list[int]:
        return [r * width + c for r in range(self.r0, self.r1 + 1) for c in range(self.c0, self.c1 + 1)]


@dataclass(frozen=True)
class AnnotationSet:
    query_id: str
    page_id: str
    grid: PatchGrid
    boxes: tuple[Box, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def patch_set(self, match_kind: MatchKind | None = None) -> set[int]:
        """Flat indices of every patch inside any box (optionally of one kind)."""
        out: set[int] = set()
        for box in self.boxes:
            if match_kind is None or box.match_kind == match_kind:
                out.update(box.cells(self.grid.width))
        return out


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _check_grid(grid: Any, prefix: str = "grid") -> list[str]:
    errs = []
    if not isinstance(grid, PatchGrid):
        return [f"{prefix}: not a PatchGrid"]
    if not isinstance(grid.height, int) or grid.height < 1:
        errs.append(f"{prefix}.height >= 1")
    if not isinstance(grid.width, int) or grid.width < 1:
        errs.append(f"{prefix}.width >= 1")
    return errs


def _validate_embedding(m: EmbeddingMatrix) -> list[str]:
    errs = []
    data = m.data
    if data.ndim != 2:
        return ["data must be a rows x dim matrix"]
    if data.shape[0] < 1:
        errs.append("rows >= 1")
    if data.shape[1] < 1:
        errs.append("dim >= 1")
    if not np.all(np.isfinite(data)):
        errs.append("entries finite")
    elif m.normalized and data.size:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            errs.append(f"normalized rows have unit norm (row {int(bad[0])} has norm {norms[bad[0]]:.9f})")
    return errs


def _validate_attention(a: AttentionMap) -> list[str]:
    errs = _check_grid(a.grid)
    if errs:
        return errs
    v = a.values
    if v.size != a.grid.size:
        errs.append(f"values length {v.size} == height*width {a.grid.size}")
    if not np.all(np.isfinite(v)):
        errs.append("values finite")
    elif np.any(v < 0):
        errs.append("values >= 0")
    if not isinstance(a.provenance, Provenance):
        errs.append("provenance code valid")
    elif a.provenance == Provenance.REFINED and np.all(np.isfinite(v)):
        total = float(np.sum(v))
        if abs(total - 1.0) > SUM_TOL:
            errs.append(f"refined values sum to 1 (sum {total:.9f})")
    return errs


def _validate_stack(s: LayerAttentionStack) -> list[str]:
    errs = []
    if s.layers < 1:
        errs.append("layers >= 1")
    maps = list(s.per_layer)
    if s.per_token is not None:
        if len(s.per_token) != s.layers:
            errs.append("per_token has one entry per layer")
        for tokens in s.per_token:
            if len(tokens) < 1:
                errs.append("per_token layer has >= 1 token map")
            maps.extend(tokens)
    grids = {m.grid for m in maps}
    if len(grids) > 1:
        errs.append("member maps share one grid")
    for i, m in enumerate(maps):
        errs.extend(f"map {i}: {e}" for e in _validate_attention(m))
    return errs


def _validate_annotation(a: AnnotationSet) -> list[str]:
    errs = _check_grid(a.grid)
    if errs:
        return errs
    h, w = a.grid.height, a.grid.width
    for i, b in enumerate(a.boxes):
        if not 0 <= b.r0:
            errs.append(f"box {i}: r0 >= 0")
        if not b.r0 <= b.r1:
            errs.append(f"box {i}: r0 <= r1")
        if not b.r1 < h:
            errs.append(f"box {i}: r1 < height")
        if not 0 <= b.c0:
            errs.append(f"box {i}: c0 >= 0")
        if not b.c0 <= b.c1:
            errs.append(f"box {i}: c0 <= c1")
        if not b.c1 < w:
            errs.append(f"box {i}: c1 < width")
    return errs


def validate(entity: Any) -> list[str]:
    """Return the violated invariants of ``entity`` (empty list means valid).

    Never raises: unknown or badly broken objects are reported, not rejected.
    """
    try:
        if isinstance(entity, EmbeddingMatrix):
            return _validate_embedding(entity)
        if isinstance(entity, AttentionMap):
            return _validate_attention(entity)
        if isinstance(entity, LayerAttentionStack):
            return _validate_stack(entity)
        if isinstance(entity, AnnotationSet):
            return _validate_annotation(entity)
        if isinstance(entity, PatchGrid):
            return _check_grid(entity)
        if hasattr(entity, "validate"):
            return list(entity.validate())
    except Exception as exc:  # noqa: BLE001 - reporting must be total
        return [f"unvalidatable entity: {exc}"]
    return [f"unknown entity type {type(entity).__name__}"]


def ensure_valid(entity: Any) -> None:
    errs = validate(entity)
    if errs:
        raise ValidationError(errs)


# ---------------------------------------------------------------------------
# Deterministic generator
# ---------------------------------------------------------------------------

_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset .. offset+n-1`` of the SplitMix64 stream for ``seed``.

    Output ``k`` is ``mix(seed + (k + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` with
    the standard SplitMix64 finalizer, so any slice of the stream can be
    computed without materializing its prefix.
    """
    k = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + k * _GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix_uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Uniform floats in [0, 1) from the top 53 bits of each output."""
    return (splitmix64(seed, n, offset) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def splitmix_normal(seed: int, n: int) -> np.ndarray:
    """Standard normals by Box-Muller, cosine branch only.

    Normal ``k`` consumes outputs ``2k`` and ``2k+1``:
    ``u1 = (top53(x_2k) + 1) / 2**53`` in (0, 1], ``u2 = top53(x_2k+1) / 2**53``,
    ``z = sqrt(-2 ln u1) * cos(2 pi u2)``.
    """
    bits = splitmix64(seed, 2 * n) >> np.uint64(11)
    u1 = (bits[0::2].astype(np.float64) + 1.0) * 2.0**-53
    u2 = bits[1::2].astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def seeded_random_matrix(
    rows: int,
    dim: int,
    seed: int,
    *,
    id: str = "",
    kind: Kind = Kind.PAGE,
    normalize: bool = False,
) -> EmbeddingMatrix:
    """Deterministic standard-normal matrix, filled row-major."""
    if rows < 1 or dim < 1:
        raise ValueError(f"rows and dim must be >= 1, got {rows}x{dim}")
    data = splitmix_normal(seed, rows * dim).reshape(rows, dim)
    if normalize:
        data = data / np.linalg.norm(data, axis=1, keepdims=True)
    return EmbeddingMatrix(id, data, kind=kind, normalized=normalize)


# ---------------------------------------------------------------------------
# Top-K% selection (shared by the top-K loss and the coverage metric)
# ---------------------------------------------------------------------------


def top_k_count(k_percent: float, n: int) -> int:
    """``ceil(k_percent / 100 * n)``, robust to float noise such as 7% of 100."""
    return math.ceil(round(k_percent * n / 100.0, 9))


def top_k_indices(values, k_percent: float) -> np.ndarray:
    """Indices of the ``top_k_count`` largest values; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    n = top_k_count(k_percent, values.size)
    return np.argsort(-values, kind="stable")[:n]
