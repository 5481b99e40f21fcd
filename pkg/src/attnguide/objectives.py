"""Training objectives with hand-derived gradients.

Global term (softplus over the hardest in-batch negative)::

    L_global = log(1 + exp(S(q, d-) - S(q, d+)))

Local terms align the patch-query similarity vector ``s`` with the flattened
attention target ``a``::

    L_kl    = KL(softmax(a) || softmax(s))
    L_topk  = -log(sum_{j in P+} exp(s_j) / sum_i exp(s_i))
    L_cos   = 1 - <s, a> / (|s| |a|)

    L_total = L_global + lambda * L_local     (local term on the positive only)

MaxSim is differentiated with the fixed-argmax subgradient. Every loss that
depends on a discrete choice also returns that choice as ``structure`` so
:func:`gradcheck` can tell a smooth coordinate from one that crosses a
switching boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .core import splitmix_normal, splitmix_uniform, top_k_count, top_k_indices

__all__ = [
    "GradcheckReport",
    "LocalLossKind",
    "LocalLossOutput",
    "LOSS_NAMES",
    "LossOutput",
    "cosine_loss",
    "global_loss",
    "gradcheck",
    "gradcheck_suite",
    "kl_loss",
    "local_loss",
    "local_loss_on_sim",
    "maxsim_with_grad",
    "topk_loss",
    "total_loss",
]


class DegenerateLossError(ValueError):
    """The loss is identically constant for these inputs."""


@dataclass(frozen=True)
class LocalLossKind:
    name: str
    k_percent: float = 3.0

    KL = "kl"
    TOPK = "topk"
    COSINE = "cosine"

    def __post_init__(self):
        if self.name not in (self.KL, self.TOPK, self.COSINE):
            raise ValueError(f"unknown local loss {self.name!r}")
        if self.name == self.TOPK and not 0 < self.k_percent < 100:
            raise ValueError(f"top-K percent must be in (0, 100), got {self.k_percent}")

    @classmethod
    def kl(cls) -> "LocalLossKind":
        return cls(cls.KL)

    @classmethod
    def topk(cls, k_percent: float = 3.0) -> "LocalLossKind":
        return cls(cls.TOPK, k_percent)

    @classmethod
    def cosine(cls) -> "LocalLossKind":
        return cls(cls.COSINE)

    @classmethod
    def parse(cls, text: str) -> "LocalLossKind":
        """``"kl"``, ``"cosine"``, ``"topk"`` or ``"topk:3"``."""
        name, _, pct = text.strip().lower().partition(":")
        if name == cls.TOPK and pct:
            return cls(name, float(pct))
        return cls(name)

    def __str__(self) -> str:
        return f"topk:{self.k_percent:g}" if self.name == self.TOPK else self.name


@dataclass
class LocalLossOutput:
    """Loss value and its gradient with respect to the similarity vector."""

    value: float
    grad: np.ndarray
    structure: Hashable = None


@dataclass
class LossOutput:
    value: float
    grad_query: np.ndarray
    grad_pages: list[np.ndarray]
    structure: Hashable = None
    parts: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / np.sum(z)


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.sum(np.exp(x - m))))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def maxsim_with_grad(query: np.ndarray, page: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, tuple[int, ...]]:
    """MaxSim score with its subgradients for the fixed argmax.

    Returns ``(score, d_score/d_query, d_score/d_page, argmax)``.
    """
    sims = query @ page.T
    argmax = np.argmax(sims, axis=1)
    rows = np.arange(query.shape[0])
    score = float(np.sum(sims[rows, argmax]))
    g_query = page[argmax]
    g_page = np.zeros_like(page)
    np.add.at(g_page, argmax, query)
    return score, g_query, g_page, tuple(int(j) for j in argmax)


def _check_sim_target(sim: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(getattr(sim, "values", sim), dtype=np.float64).reshape(-1)
    a = np.asarray(getattr(target, "values", target), dtype=np.float64).reshape(-1)
    if s.shape != a.shape:
        raise ValueError(f"length mismatch: similarity {s.size} vs target {a.size}")
    return s, a


# ---------------------------------------------------------------------------
# Global loss
# ---------------------------------------------------------------------------


def global_loss(
    query: np.ndarray,
    pages: Sequence[np.ndarray],
    positive: int,
    page_ids: Sequence[str] | None = None,
) -> LossOutput:
    """Softplus loss against the hardest non-positive page of the batch.

    ``pages`` is the whole batch; ``positive`` indexes the relevant page in it.
    Equal negative scores resolve to the lexicographically smallest page id
    (batch order when ``page_ids`` is omitted).
    """
    query = np.asarray(query, dtype=np.float64)
    pages = [np.asarray(p, dtype=np.float64) for p in pages]
    if len(pages) < 2:
        raise ValueError("batch needs the positive and at least one other page")
    if not 0 <= positive < len(pages):
        raise ValueError(f"positive index {positive} outside batch of {len(pages)}")
    ids = list(page_ids) if page_ids is not None else [f"{i:09d}" for i in range(len(pages))]

    scored = [maxsim_with_grad(query, p) for p in pages]
    negatives = [i for i in range(len(pages)) if i != positive]
    hardest = min(negatives, key=lambda i: (-scored[i][0], ids[i]))

    s_pos, gq_pos, gp_pos, am_pos = scored[positive]
    s_neg, gq_neg, gp_neg, am_neg = scored[hardest]
    margin = s_neg - s_pos
    value = softplus(margin)
    w = _sigmoid(margin)

    grad_pages = [np.zeros_like(p) for p in pages]
    grad_pages[positive] = -w * gp_pos
    grad_pages[hardest] = w * gp_neg
    grad_query = w * (gq_neg - gq_pos)
    return LossOutput(
        value,
        grad_query,
        grad_pages,
        structure=(hardest, am_pos, am_neg),
        parts={"global": value, "score_pos": s_pos, "score_neg": s_neg},
    )


# ---------------------------------------------------------------------------
# Local losses on the similarity vector
# ---------------------------------------------------------------------------


def kl_loss(sim, target, temperature: float = 1.0) -> LocalLossOutput:
    """``KL(softmax(a / t) || softmax(s / t))``; gradient ``(q - p) / t``."""
    s, a = _check_sim_target(sim, target)
    if np.any(a < 0) or not np.sum(a) > 0:
        raise ValueError("target must be non-negative with a positive sum")
    p = _softmax(a / temperature)
    log_p = a / temperature - _logsumexp(a / temperature)
    log_q = s / temperature - _logsumexp(s / temperature)
    value = float(np.sum(p * (log_p - log_q)))
    q = np.exp(log_q)
    return LocalLossOutput(max(value, 0.0), (q - p) / temperature)


def topk_loss(sim, target, k_percent: float) -> LocalLossOutput:
    """Multi-positive contrast of the top-K% target patches against all patches."""
    s, a = _check_sim_target(sim, target)
    if np.any(a < 0) or not np.sum(a) > 0:
        raise ValueError("target must be non-negative with a positive sum")
    n_pos = top_k_count(k_percent, s.size)
    if n_pos < 1:
        raise DegenerateLossError("salient set is empty")
    if n_pos >= s.size:
        raise DegenerateLossError("salient set covers every patch; loss is identically 0")
    salient = top_k_indices(a, k_percent)
    value = _logsumexp(s) - _logsumexp(s[salient])
    grad = _softmax(s)
    grad[salient] -= _softmax(s[salient])
    return LocalLossOutput(value, grad, structure=tuple(int(i) for i in salient))


def cosine_loss(sim, target) -> LocalLossOutput:
    """``1 - cos(s, a)``. A zero ``s`` has no direction: value 1, gradient 0."""
    s, a = _check_sim_target(sim, target)
    a_norm = float(np.linalg.norm(a))
    if a_norm == 0:
        raise ValueError("target has zero norm")
    s_norm = float(np.linalg.norm(s))
    if s_norm == 0:
        return LocalLossOutput(1.0, np.zeros_like(s))
    cos = float(s @ a) / (s_norm * a_norm)
    grad = -(a / (s_norm * a_norm) - cos * s / s_norm**2)
    return LocalLossOutput(1.0 - cos, grad)


def local_loss_on_sim(sim, target, kind: LocalLossKind, temperature: float = 1.0) -> LocalLossOutput:
    if kind.name == LocalLossKind.KL:
        return kl_loss(sim, target, temperature)
    if kind.name == LocalLossKind.TOPK:
        return topk_loss(sim, target, kind.k_percent)
    return cosine_loss(sim, target)


def local_loss(
    query: np.ndarray,
    page: np.ndarray,
    target,
    kind: LocalLossKind,
    temperature: float = 1.0,
) -> LossOutput:
    """Local loss on ``s = page @ mean(query)`` with gradients for both matrices."""
    query = np.asarray(query, dtype=np.float64)
    page = np.asarray(page, dtype=np.float64)
    q_mean = query.mean(axis=0)
    out = local_loss_on_sim(page @ q_mean, target, kind, temperature)
    g = out.grad
    grad_page = np.outer(g, q_mean)
    grad_query = np.tile(page.T @ g / query.shape[0], (query.shape[0], 1))
    return LossOutput(out.value, grad_query, [grad_page], structure=out.structure, parts={"local": out.value})


def total_loss(
    query: np.ndarray,
    pages: Sequence[np.ndarray],
    positive: int,
    attention_target,
    kind: LocalLossKind,
    lam: float,
    page_ids: Sequence[str] | None = None,
    temperature: float = 1.0,
) -> LossOutput:
    """``L_global + lam * L_local`` with the local term on the positive page.

    ``attention_target=None`` means the instance has no attention supervision
    and only the global term is returned (the local term is absent, not 0).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    out = global_loss(query, pages, positive, page_ids)
    if attention_target is None or lam == 0:
        out.parts["total"] = out.value
        return out
    loc = local_loss(query, pages[positive], attention_target, kind, temperature)
    grad_pages = list(out.grad_pages)
    grad_pages[positive] = grad_pages[positive] + lam * loc.grad_pages[0]
    value = out.value + lam * loc.value
    parts = dict(out.parts, local=loc.value, total=value)
    return LossOutput(
        value,
        out.grad_query + lam * loc.grad_query,
        grad_pages,
        structure=(out.structure, loc.structure),
        parts=parts,
    )


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    excluded: list[tuple[int, int]]
    tolerance: float
    worst: tuple[int, int] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "excluded": [list(c) for c in self.excluded],
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def gradcheck(
    fn: Callable[[list[np.ndarray]], tuple[float, Hashable]],
    params: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-4,
    tolerance: float = 1e-4,
    n_coords: int = 64,
    seed: int = 0,
) -> GradcheckReport:
    """Compare ``analytic`` gradients with central differences of ``fn``.

    ``fn`` maps a list of parameter arrays to ``(loss, structure)``. A
    coordinate whose +h or -h probe changes ``structure`` (an argmax flips, a
    different hardest negative wins) sits on a non-differentiable boundary
    and is excluded and listed rather than compared. At most ``n_coords``
    coordinates are checked, drawn with a seeded generator; smaller problems
    are checked exhaustively.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    if len(analytic) != len(params):
        raise ValueError("one analytic gradient per parameter")
    for p, g in zip(params, analytic):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")

    def evaluate(ps):
        value, key = fn(ps)
        if not math.isfinite(value):
            raise FloatingPointError("loss is not finite at a probe point")
        return value, key

    _, key0 = evaluate(params)
    coords = [(pi, fi) for pi, p in enumerate(params) for fi in range(p.size)]
    if len(coords) > n_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst_err, worst = 0.0, None
    excluded = []
    checked = 0
    for pi, fi in coords:
        flat = params[pi].reshape(-1)
        orig = flat[fi]
        flat[fi] = orig + h
        f_plus, k_plus = evaluate(params)
        flat[fi] = orig - h
        f_minus, k_minus = evaluate(params)
        flat[fi] = orig
        if k_plus != key0 or k_minus != key0:
            excluded.append((pi, fi))
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        err = rel_error(float(np.asarray(analytic[pi]).reshape(-1)[fi]), numeric)
        checked += 1
        if worst is None or err > worst_err:
            worst_err, worst = err, (pi, fi)
    return GradcheckReport(worst_err, checked, excluded, tolerance, worst)


LOSS_NAMES = ("global", "kl", "topk", "cosine", "total")


def _random_problem(seed: int, max_tokens: int, max_patches: int, max_dim: int):
    u = splitmix_uniform(seed, 8)
    nq = 1 + int(u[0] * max_tokens)
    nd = 2 + int(u[1] * (max_patches - 1))
    dim = 1 + int(u[2] * max_dim)
    n_pages = 2 + int(u[3] * 3)
    query = splitmix_normal(seed + 1, nq * dim).reshape(nq, dim)
    pages = [splitmix_normal(seed + 2 + i, nd * dim).reshape(nd, dim) for i in range(n_pages)]
    target = splitmix_uniform(seed + 100, nd)
    target[int(u[4] * nd)] += 2.0
    positive = int(u[5] * n_pages)
    return query, pages, positive, target


def gradcheck_suite(
    loss: str,
    instances: int = 100,
    seed: int = 0,
    lam: float = 0.1,
    kind: LocalLossKind = LocalLossKind(LocalLossKind.COSINE),
    max_tokens: int = 8,
    max_patches: int = 32,
    max_dim: int = 16,
    tolerance: float = 1e-4,
) -> dict:
    """Gradient check of one loss on ``instances`` seeded random problems.

    ``loss`` is one of :data:`LOSS_NAMES`; ``kind`` and ``lam`` apply to
    ``"total"`` only. Local losses are checked through ``s = page @ mean(q)``
    so both matrices are differentiated.
    """
    if loss not in LOSS_NAMES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {', '.join(LOSS_NAMES)}")
    local_kinds = {"kl": LocalLossKind.kl(), "topk": LocalLossKind.topk(3.0), "cosine": LocalLossKind.cosine()}
    reports = []
    for i in range(instances):
        inst_seed = (seed * 1_000_003 + i) * 7919
        query, pages, positive, target = _random_problem(inst_seed, max_tokens, max_patches, max_dim)
        if loss == "global":
            def fn(ps, positive=positive):
                out = global_loss(ps[0], ps[1:], positive)
                return out.value, out.structure
            out = global_loss(query, pages, positive)
            params, grads = [query, *pages], [out.grad_query, *out.grad_pages]
        elif loss == "total":
            def fn(ps, positive=positive, target=target):
                out = total_loss(ps[0], ps[1:], positive, target, kind, lam)
                return out.value, out.structure
            out = total_loss(query, pages, positive, target, kind, lam)
            params, grads = [query, *pages], [out.grad_query, *out.grad_pages]
        else:
            k = local_kinds[loss]
            page = pages[positive]

            def fn(ps, k=k, target=target):
                out = local_loss(ps[0], ps[1], target, k)
                return out.value, out.structure
            out = local_loss(query, page, target, k)
            params, grads = [query, page], [out.grad_query, out.grad_pages[0]]
        reports.append(gradcheck(fn, params, grads, tolerance=tolerance, seed=inst_seed))
    worst = max(r.max_rel_error for r in reports)
    return {
        "loss": loss,
        "instances": instances,
        "seed": seed,
        "max_rel_error": worst,
        "checked": sum(r.checked for r in reports),
        "excluded": sum(len(r.excluded) for r in reports),
        "tolerance": tolerance,
        "passed": worst < tolerance,
    }
