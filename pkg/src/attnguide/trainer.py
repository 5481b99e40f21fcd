"""Desk-scale retriever training with attention guidance.

A linear projection (optionally row-normalized) maps frozen base features of
query tokens and page patches to late-interaction embeddings. Each step
scores every query in a mini-batch against all pages in that batch, applies
the softplus loss on the hardest in-batch negative and, for supervised
instances, the local alignment loss on the positive page. Updates are plain
gradient descent with a fixed learning rate, so a seed fully determines the
trajectory.
"""

from __future__ import annotations

import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import AnnotationSet, AttentionMap, EmbeddingMatrix, Kind, PatchGrid, seeded_random_matrix
from .evaluation import Qrels, RunFile, coverage_at_kpercent, ndcg_at_k
from .late_interaction import PageIndex
from .objectives import LocalLossKind, cosine_loss, total_loss
from .storage import atomic_write

logger = logging.getLogger(__name__)

__all__ = [
    "Corpus",
    "ProjectionHead",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "TrainingInstance",
    "compare_local_losses",
    "evaluate_head",
    "mismatch_scores",
    "select_supervised",
    "sweep_lambda",
    "train",
]

RANDOM = "random"
MISMATCH_FIRST = "mismatch-first"
BACKBONE_LEARNING_RATE = 1e-4


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


@dataclass
class ProjectionHead:
    weight: np.ndarray
    normalize_output: bool = True

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ValueError(f"weight must be a non-empty matrix, got shape {self.weight.shape}")

    @classmethod
    def init(
        cls,
        dim_in: int,
        dim_out: int,
        seed: int,
        normalize_output: bool = True,
        identity: bool = False,
        noise: float = 0.1,
    ) -> "ProjectionHead":
        """Seeded start point.

        ``identity=True`` starts from a truncated identity plus ``noise``-scaled
        perturbation, standing in for an already-trained encoder that is being
        fine-tuned. Otherwise the weight is Gaussian with variance 1/dim_in.
        """
        g = seeded_random_matrix(dim_in, dim_out, seed).as_float64() / math.sqrt(dim_in)
        if identity:
            return cls(np.eye(dim_in, dim_out) + noise * g, normalize_output)
        return cls(g, normalize_output)

    def validate(self) -> list[str]:
        return [] if np.all(np.isfinite(self.weight)) else ["weight entries finite"]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        z = x @ self.weight
        if not self.normalize_output:
            return z, (x, None, None)
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        norms = np.maximum(norms, 1e-12)
        e = z / norms
        return e, (x, e, norms)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=np.float64))[0]

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(buf, weight=self.weight, normalize_output=np.array(self.normalize_output))
        atomic_write(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "ProjectionHead":
        with np.load(path) as z:
            return cls(z["weight"], bool(z["normalize_output"]))

    def backward(self, cache: tuple, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of the loss with respect to ``weight``."""
        x, e, norms = cache
        if e is None:
            return x.T @ grad_out
        grad_z = (grad_out - e * np.sum(e * grad_out, axis=1, keepdims=True)) / norms
        return x.T @ grad_z


@dataclass
class TrainingInstance:
    query_id: str
    query_features: np.ndarray
    positive_id: str
    page_features: dict[str, np.ndarray]
    attention_target: AttentionMap | None = None

    def __post_init__(self):
        if self.positive_id not in self.page_features:
            raise ValueError(f"{self.query_id}: positive page {self.positive_id!r} missing from candidates")

    def validate(self) -> list[str]:
        errs = []
        if self.attention_target is not None:
            n = self.page_features[self.positive_id].shape[0]
            if self.attention_target.grid.size != n:
                errs.append(
                    f"{self.query_id}: attention grid {self.attention_target.grid} does not match {n} patches"
                )
        return errs


@dataclass(frozen=True)
class TrainConfig:
    """Defaults suit desk-scale corpora like the planted one: the head starts
    near identity and takes large steps so a few epochs over ~100 queries
    move it."""

    lam: float = 0.1
    local_kind: LocalLossKind = LocalLossKind(LocalLossKind.COSINE)
    batch_size: int = 4
    epochs: int = 3
    learning_rate: float = 1.0
    seed: int = 0
    supervised_fraction: float = 1.0
    selection: str = RANDOM
    dim_out: int = 32
    normalize_output: bool = True
    init_identity: bool = True
    init_noise: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.supervised_fraction <= 1:
            raise ValueError("supervised_fraction must be in [0, 1]")
        if self.selection not in (RANDOM, MISMATCH_FIRST):
            raise ValueError(f"unknown selection strategy {self.selection!r}")

    @classmethod
    def backbone_preset(cls, **overrides) -> "TrainConfig":
        """Step size used when fine-tuning adapters on a multi-billion-parameter
        backbone; far too small to move a desk-scale head in a few epochs."""
        return cls(**{"learning_rate": BACKBONE_LEARNING_RATE, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["local_kind"] = str(self.local_kind)
        return d


@dataclass
class TrainResult:
    head: ProjectionHead
    log: list[dict] = field(default_factory=list)
    supervised: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Sample selection
# ---------------------------------------------------------------------------


def mismatch_scores(dataset: Sequence[TrainingInstance], head: ProjectionHead) -> dict[str, float]:
    """``1 - cos(s, target)`` on each instance's positive page."""
    out = {}
    for inst in dataset:
        if inst.attention_target is None:
            raise ValueError(f"{inst.query_id}: mismatch-first selection needs an attention target")
        q = head.encode(inst.query_features)
        p = head.encode(inst.page_features[inst.positive_id])
        s = p @ q.mean(axis=0)
        out[inst.query_id] = cosine_loss(s, inst.attention_target.values).value
    return out


def select_supervised(
    dataset: Sequence[TrainingInstance],
    fraction: float,
    strategy: str = RANDOM,
    head: ProjectionHead | None = None,
    seed: int = 0,
) -> list[str]:
    """Query ids that receive attention supervision, ``ceil(fraction * N)`` of them."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    n = math.ceil(round(fraction * len(dataset), 9))
    ids = [inst.query_id for inst in dataset]
    if strategy == RANDOM:
        rng = np.random.default_rng(seed)
        picked = rng.permutation(len(ids))[:n]
        return sorted(ids[i] for i in picked)
    if strategy == MISMATCH_FIRST:
        if head is None:
            raise ValueError("mismatch-first selection needs the current head")
        scores = mismatch_scores(dataset, head)
        ranked = sorted(ids, key=lambda qid: (-scores[qid], qid))
        return sorted(ranked[:n])
    raise ValueError(f"unknown selection strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _step_terms(head, batch, page_ids, page_feats, supervised, cfg):
    """Loss parts and the weight gradient contributed by each batch instance."""
    encoded = [head.forward(x) for x in page_feats]
    pages = [e for e, _ in encoded]

    def one(inst: TrainingInstance):
        eq, q_cache = head.forward(inst.query_features)
        target = inst.attention_target if inst.query_id in supervised else None
        out = total_loss(
            eq,
            pages,
            page_ids.index(inst.positive_id),
            None if target is None else target.values,
            cfg.local_kind,
            cfg.lam,
            page_ids=page_ids,
        )
        grad = head.backward(q_cache, out.grad_query)
        for (_, p_cache), gp in zip(encoded, out.grad_pages):
            if np.any(gp):
                grad = grad + head.backward(p_cache, gp)
        return out.parts, grad

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(one, batch))
    return [one(inst) for inst in batch]


def train(
    dataset: Sequence[TrainingInstance],
    cfg: TrainConfig,
    head: ProjectionHead | None = None,
) -> TrainResult:
    if not dataset:
        raise ValueError("dataset is empty")
    for inst in dataset:
        errs = inst.validate()
        if errs:
            raise ValueError("; ".join(errs))
    dim_in = dataset[0].query_features.shape[1]
    if head is None:
        head = ProjectionHead.init(
            dim_in, cfg.dim_out, cfg.seed, cfg.normalize_output, cfg.init_identity, cfg.init_noise
        )
    head = ProjectionHead(head.weight.copy(), head.normalize_output)

    supervised: set[str] = set()
    if cfg.lam > 0:
        eligible = [inst for inst in dataset if inst.attention_target is not None]
        supervised = set(select_supervised(eligible, cfg.supervised_fraction, cfg.selection, head, cfg.seed))

    rng = np.random.default_rng(cfg.seed)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            pool: dict[str, np.ndarray] = {}
            for inst in batch:
                pool.update(inst.page_features)
            page_ids = sorted(pool)
            if len(page_ids) < 2:
                continue
            terms = _step_terms(head, batch, page_ids, [pool[p] for p in page_ids], supervised, cfg)

            g_vals = [parts["global"] for parts, _ in terms]
            l_vals = [parts["local"] for parts, _ in terms if "local" in parts]
            t_vals = [parts["total"] for parts, _ in terms]
            grad = terms[0][1]
            for _, g in terms[1:]:
                grad = grad + g
            grad = grad / len(batch)
            total = math.fsum(t_vals) / len(batch)
            if not math.isfinite(total) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(step, total)
            head.weight = head.weight - cfg.learning_rate * grad
            log.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "batch": [inst.query_id for inst in batch],
                    "global": math.fsum(g_vals) / len(g_vals),
                    "local": math.fsum(l_vals) / len(l_vals) if l_vals else None,
                    "local_terms": len(l_vals),
                    "total": total,
                }
            )
            step += 1
    return TrainResult(head, log, sorted(supervised))


# ---------------------------------------------------------------------------
# Evaluation and harnesses
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    """Base features plus everything needed to train and evaluate a head."""

    grid: PatchGrid
    query_features: dict[str, np.ndarray]
    page_features: dict[str, np.ndarray]
    qrels: Qrels
    train: list[TrainingInstance]
    test_queries: list[str]
    annotations: dict[tuple[str, str], AnnotationSet] = field(default_factory=dict)


def evaluate_head(
    head: ProjectionHead,
    corpus: Corpus,
    query_ids: Sequence[str] | None = None,
    k_percent: float = 3.0,
    ks: Sequence[int] = (1, 5),
) -> dict[str, float]:
    """nDCG over the full page collection and coverage of annotated patches."""
    query_ids = list(corpus.test_queries if query_ids is None else query_ids)
    pages = [
        EmbeddingMatrix(pid, head.encode(corpus.page_features[pid]), Kind.PAGE)
        for pid in sorted(corpus.page_features)
    ]
    index = PageIndex.build(pages)
    rankings = {}
    coverages = []
    for qid in query_ids:
        q = EmbeddingMatrix(qid, head.encode(corpus.query_features[qid]), Kind.QUERY)
        rankings[qid] = index.retrieve(q, max(ks))
        qf = q.as_float64().mean(axis=0)
        for pid in sorted(corpus.qrels.get(qid)):
            ann = corpus.annotations.get((qid, pid))
            if ann is None:
                continue
            s = index[pid].as_float64() @ qf
            res = coverage_at_kpercent(s, ann, k_percent)
            if res is not None:
                coverages.append(res.overall)
    run = RunFile.from_retrieval(rankings)
    metrics = {f"ndcg@{k}": ndcg_at_k(run, corpus.qrels, k).mean for k in ks}
    metrics[f"coverage@{k_percent:g}%"] = float(math.fsum(coverages) / len(coverages)) if coverages else float("nan")
    metrics["coverage_evaluated"] = len(coverages)
    return metrics


def _final_losses(log: list[dict], epoch: int) -> dict[str, float | None]:
    rows = [r for r in log if r["epoch"] == epoch]
    g = [r["global"] for r in rows]
    l = [r["local"] for r in rows if r["local"] is not None]
    return {
        "final_global": math.fsum(g) / len(g) if g else None,
        "final_local": math.fsum(l) / len(l) if l else None,
    }


def sweep_lambda(corpus: Corpus, lambdas: Sequence[float], cfg: TrainConfig, k_percent: float = 3.0) -> list[dict]:
    """One head per lambda (shared seed), each scored on the held-out queries."""
    if not lambdas:
        raise ValueError("need at least one lambda")
    rows = []
    for lam in lambdas:
        t0 = time.perf_counter()
        result = train(corpus.train, replace(cfg, lam=float(lam)))
        row = {"lambda": float(lam)}
        row.update(evaluate_head(result.head, corpus, k_percent=k_percent))
        row.update(_final_losses(result.log, cfg.epochs - 1))
        rows.append(row)
        logger.info("lambda=%g trained in %.2fs", lam, time.perf_counter() - t0)
    return rows


def compare_local_losses(
    corpus: Corpus,
    kinds: Sequence[LocalLossKind],
    cfg: TrainConfig,
    k_percent: float = 3.0,
) -> list[dict]:
    """One head per local loss kind at ``cfg.lam``, scored like :func:`sweep_lambda`."""
    if not kinds:
        raise ValueError("need at least one loss kind")
    rows = []
    for kind in kinds:
        result = train(corpus.train, replace(cfg, local_kind=kind))
        row = {"local_loss": str(kind), "lambda": cfg.lam}
        row.update(evaluate_head(result.head, corpus, k_percent=k_percent))
        row.update(_final_losses(result.log, cfg.epochs - 1))
        rows.append(row)
    return rows
