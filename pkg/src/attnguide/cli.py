"""Command-line interface; every subcommand wraps one library call.

Exit status: 0 on success, 1 on a domain error (a single JSON line on
stderr), 2 on usage errors. Outputs go only to paths named by flags, or to
stdout for reports. ``--seed`` defaults to the ``AGREE_SEED`` environment
variable, else 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import attention as att
from . import evaluation as ev
from . import late_interaction as li
from . import objectives as obj
from . import storage as st
from . import trainer as tr
from .core import LayerAttentionStack, Kind, PatchGrid, ValidationError, validate
from .dataset import DatasetError, load_manifest, save_manifest
from .planted import PlantedConfig, make_planted_corpus

SEED_ENV = "AGREE_SEED"


class CliError(Exception):
    def __init__(self, code: str, message: str, record: int | None = None):
        self.code, self.record = code, record
        super().__init__(message)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "-"
    return str(v)


def format_table(rows: list[dict]) -> str:
    """Plain aligned text table; columns in first-row key order."""
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def _emit(args, payload, rows: list[dict] | None = None, text: str | None = None) -> None:
    """Report to ``--report`` if given, else stdout; JSON when ``--json``."""
    if args.json:
        out = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    elif text is not None:
        out = text
    else:
        out = format_table(rows if rows is not None else [payload])
    report = getattr(args, "report", None)
    if report:
        st.atomic_write(report, out)
    else:
        sys.stdout.write(out)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_queries(path):
    return st.read_embedding_store(path, Kind.QUERY).matrices


def _load_pages(path):
    return st.read_embedding_store(path, Kind.PAGE).matrices


def _pick(matrices, ids, what):
    if not ids:
        return matrices
    by_id = {m.id: m for m in matrices}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError("unknown-id", f"{what} ids not found: {missing}")
    return [by_id[i] for i in ids]


def cmd_score(args):
    queries = _pick(_load_queries(args.queries), args.query, "query")
    pages = _pick(_load_pages(args.pages), args.page, "page")
    rows = []
    for q in queries:
        for p in pages:
            rows.append({"query_id": q.id, "page_id": p.id, "score": li.maxsim_score(q, p).score})
    _emit(args, rows, rows)


def cmd_retrieve(args):
    index = li.PageIndex.build(_load_pages(args.pages))
    queries = _pick(_load_queries(args.queries), args.query, "query")
    results = {q.id: index.retrieve(q, args.k, workers=args.workers) for q in queries}
    run = ev.RunFile.from_retrieval(results)
    st.write_run(args.out, run)


def cmd_simmap(args):
    grid = PatchGrid.parse(args.grid)
    queries = {m.id: m for m in _load_queries(args.queries)}
    pages = {m.id: m for m in _load_pages(args.pages)}
    if args.qrels:
        qrels = st.read_qrels(args.qrels)
        pairs = [(q, p) for q in sorted(qrels.judgments) for p in sorted(qrels.judgments[q])]
    else:
        pairs = [(q, p) for q in sorted(queries) for p in sorted(pages)]
    maps = []
    for q, p in pairs:
        if q not in queries or p not in pages:
            raise CliError("unknown-id", f"pair ({q}, {p}) not found in the stores")
        maps.append(li.similarity_map(queries[q], pages[p], grid))
    st.write_attention_store(args.out, maps)


def layer_stacks(maps) -> list[LayerAttentionStack]:
    """Group layer-wise records into stacks, one per (query_id, page_id).

    Records of one pair are layers in file order. A record whose metadata has
    a ``"layer"`` key groups with others sharing it; when several records
    share a layer they are that layer's per-token maps.
    """
    groups: dict[tuple[str, str], dict] = {}
    for i, m in enumerate(maps):
        layers = groups.setdefault((m.query_id, m.page_id), {})
        layer = m.metadata.get("layer", f"#{i}")
        layers.setdefault(layer, []).append(m)
    stacks = []
    for layers in groups.values():
        per_layer = tuple(ms[0] for ms in layers.values())
        tokens = None
        if any(len(ms) > 1 for ms in layers.values()):
            tokens = tuple(tuple(ms) for ms in layers.values())
            per_layer = tuple(att.average_query_tokens(ms) for ms in tokens)
        stacks.append(LayerAttentionStack(per_layer, tokens))
    return stacks


def cmd_aggregate(args):
    maps = st.read_attention_store(args.input).maps
    out = [att.aggregate_layers(s) for s in layer_stacks(maps)]
    st.write_attention_store(args.out, out)


def cmd_refine(args):
    task = st.read_attention_store(args.task).maps
    general = {}
    for m in st.read_attention_store(args.general).maps:
        if m.page_id in general:
            raise CliError("duplicate-id", f"general attention has two maps for page {m.page_id!r}")
        general[m.page_id] = m
    cfg = att.RefinementConfig(args.epsilon, not args.raw)
    out = []
    for i, m in enumerate(task):
        g = general.get(m.page_id)
        if g is None:
            raise CliError("unknown-id", f"no general attention for page {m.page_id!r}", i)
        out.append(att.refine_pmi(m, g, cfg))
    st.write_attention_store(args.out, out)


def cmd_downsample(args):
    target = PatchGrid.parse(args.target)
    maps = st.read_attention_store(args.input).maps
    st.write_attention_store(args.out, [att.downsample(m, target) for m in maps])


def cmd_synth_attn(args):
    annotations = st.read_annotations(args.annotations)
    maps = [
        att.synthesize_attention(a, args.peak, args.background, args.seed + i) for i, a in enumerate(annotations)
    ]
    st.write_attention_store(args.out, maps)


def _train_config(args) -> tr.TrainConfig:
    return tr.TrainConfig(
        lam=args.lam,
        local_kind=obj.LocalLossKind.parse(args.loss),
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        supervised_fraction=args.fraction,
        selection=args.selection,
        dim_out=args.dim_out,
        normalize_output=not args.no_normalize,
        init_identity=not args.random_init,
        init_noise=args.init_noise,
        workers=args.workers,
    )


def cmd_train(args):
    corpus = load_manifest(args.manifest)
    cfg = _train_config(args)
    result = tr.train(corpus.train, cfg)
    result.head.save(args.out)
    if args.log:
        st.atomic_write(args.log, "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.log))
    metrics = tr.evaluate_head(result.head, corpus, k_percent=args.k_percent)
    payload = {"config": cfg.to_dict(), "metrics": metrics, "supervised": len(result.supervised), "steps": len(result.log)}
    _emit(args, payload, [metrics])


def cmd_sweep_lambda(args):
    corpus = load_manifest(args.manifest)
    lambdas = [float(x) for x in args.lambdas.split(",")]
    rows = tr.sweep_lambda(corpus, lambdas, _train_config(args), args.k_percent)
    _emit(args, rows, rows)


def cmd_compare_losses(args):
    corpus = load_manifest(args.manifest)
    kinds = [obj.LocalLossKind.parse(x) for x in args.losses.split(",")]
    rows = tr.compare_local_losses(corpus, kinds, _train_config(args), args.k_percent)
    _emit(args, rows, rows)


def cmd_select_hard(args):
    corpus = load_manifest(args.manifest)
    cfg = _train_config(args)
    eligible = [inst for inst in corpus.train if inst.attention_target is not None]
    if not eligible:
        raise CliError("invalid-record", "no instance has an attention target")
    if args.head:
        head = tr.ProjectionHead.load(args.head)
    else:
        dim_in = eligible[0].query_features.shape[1]
        head = tr.ProjectionHead.init(dim_in, cfg.dim_out, cfg.seed, cfg.normalize_output, cfg.init_identity, cfg.init_noise)
    ids = tr.select_supervised(eligible, args.fraction, args.selection, head, args.seed)
    st.atomic_write(args.out, "".join(q + "\n" for q in ids))


def cmd_eval_ndcg(args):
    report = ev.ndcg_at_k(st.read_run(args.run), st.read_qrels(args.qrels), args.k)
    d = report.to_dict()
    _emit(args, d, text=f"{report.metric}\t{report.mean:.4f}\t(evaluated {d['evaluated']}, skipped {d['skipped']})\n")


def cmd_eval_coverage(args):
    maps = {(m.query_id, m.page_id): m for m in st.read_attention_store(args.maps).maps}
    report = ev.mean_coverage(maps, st.read_annotations(args.annotations), args.k_percent)
    d = report.to_dict()
    _emit(args, d, text=f"{report.metric}\t{report.mean:.4f}\t(evaluated {d['evaluated']}, skipped {d['skipped']})\n")


def cmd_eval_iou(args):
    a = {(x.query_id, x.page_id): x for x in st.read_annotations(args.a)}
    b = {(x.query_id, x.page_id): x for x in st.read_annotations(args.b)}
    keys = sorted(set(a) & set(b))
    if not keys:
        raise CliError("unknown-id", "the two annotation files share no (query_id, page_id) pair")
    rows = [{"query_id": q, "page_id": p, "iou": ev.annotation_iou(a[(q, p)], b[(q, p)])} for q, p in keys]
    mean = sum(r["iou"] for r in rows) / len(rows)
    _emit(args, {"mean": mean, "pairs": rows, "unmatched": len(set(a) ^ set(b))}, rows)


def _check_entities(entities, label):
    for i, e in enumerate(entities):
        errs = validate(e)
        if errs:
            raise CliError("invalid-record", f"{label} {i}: {'; '.join(errs)}", i)


def cmd_validate(args):
    path = Path(args.input)
    head = path.read_bytes()[:4]
    if head == st.EMB_MAGIC or path.suffix == ".mve":
        store = st.read_embedding_store(path)
        _check_entities(store.matrices, "record")
        summary = {"kind": "embedding-store", "records": len(store.matrices), "dim": store.dim}
    elif head == st.ATT_MAGIC or path.suffix == ".att":
        store = st.read_attention_store(path)
        _check_entities(store.maps, "record")
        summary = {"kind": "attention-store", "records": len(store.maps)}
    elif path.suffix == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(doc, dict) and "instances" in doc:
            corpus = load_manifest(path)
            summary = {"kind": "manifest", "instances": len(corpus.train), "pages": len(corpus.page_features)}
        else:
            anns = st.read_annotations(path)
            _check_entities(anns, "annotation")
            summary = {"kind": "annotations", "records": len(anns)}
    elif path.suffix == ".tsv":
        # qrels have three columns, runs four
        try:
            run = st.read_run(path)
            errs = run.validate()
            if errs:
                raise CliError("invalid-record", "; ".join(errs))
            summary = {"kind": "run", "queries": len(run.rankings)}
        except ValueError:
            qrels = st.read_qrels(path)
            summary = {"kind": "qrels", "queries": len(qrels.judgments)}
    else:
        raise CliError("unknown-format", f"cannot tell the format of {path.name} (magic {head!r})")
    summary["valid"] = True
    _emit(args, summary)


def cmd_gradcheck(args):
    names = obj.LOSS_NAMES if args.loss == "all" else [args.loss]
    kind = obj.LocalLossKind.parse(args.local_loss)
    rows = [obj.gradcheck_suite(n, args.instances, args.seed, args.lam, kind) for n in names]
    _emit(args, rows, rows)
    if not all(r["passed"] for r in rows):
        failed = [r["loss"] for r in rows if not r["passed"]]
        raise CliError("gradcheck-failed", f"gradient mismatch for {', '.join(failed)}")


def cmd_make_planted(args):
    cfg = replace(PlantedConfig(), seed=args.seed, n_pages=args.pages, n_queries=args.queries)
    path = save_manifest(make_planted_corpus(cfg), args.out)
    _emit(args, {"manifest": str(path), "pages": cfg.n_pages, "queries": cfg.n_queries, "seed": cfg.seed})


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p, seed):
    d = tr.TrainConfig()
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--loss", default=str(d.local_kind), help="kl, cosine, topk or topk:<percent>")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--dim-out", type=int, default=d.dim_out)
    p.add_argument("--fraction", type=float, default=d.supervised_fraction)
    p.add_argument("--selection", choices=[tr.RANDOM, tr.MISMATCH_FIRST], default=d.selection)
    p.add_argument("--init-noise", type=float, default=d.init_noise)
    p.add_argument("--random-init", action="store_true", help="Gaussian start instead of near-identity")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--workers", type=int, default=d.workers)
    p.add_argument("--k-percent", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=seed)


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="JSON instead of a text table")
    common.add_argument("--report", help="write the report here instead of stdout")

    parser = argparse.ArgumentParser(prog="attnguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("score", cmd_score, "MaxSim scores for query/page pairs")
    p.add_argument("--queries", required=True)
    p.add_argument("--pages", required=True)
    p.add_argument("--query", action="append", help="restrict to these query ids")
    p.add_argument("--page", action="append", help="restrict to these page ids")

    p = add("retrieve", cmd_retrieve, "top-k pages per query as a run file")
    p.add_argument("--queries", required=True)
    p.add_argument("--pages", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--query", action="append")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("simmap", cmd_simmap, "min-max scaled patch similarity maps")
    p.add_argument("--queries", required=True)
    p.add_argument("--pages", required=True)
    p.add_argument("--grid", required=True, help="HxW")
    p.add_argument("--qrels", help="only the judged pairs")
    p.add_argument("--out", required=True)

    p = add("aggregate", cmd_aggregate, "mean over tokens and layers")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("refine", cmd_refine, "PMI refinement against general attention")
    p.add_argument("--task", required=True)
    p.add_argument("--general", required=True, help="one query-independent map per page")
    p.add_argument("--epsilon", type=float, default=att.RefinementConfig().epsilon)
    p.add_argument("--raw", action="store_true", help="keep raw ratios (no renormalization)")
    p.add_argument("--out", required=True)

    p = add("downsample", cmd_downsample, "adaptive max pooling to a coarser grid")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--target", required=True, help="HxW")
    p.add_argument("--out", required=True)

    p = add("synth-attn", cmd_synth_attn, "synthetic attention peaking on annotated boxes")
    p.add_argument("--annotations", required=True)
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--background", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=seed, help="record i uses seed + i")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a projection head")
    _add_train_flags(p, seed)
    p.add_argument("--out", required=True, help="checkpoint (.npz)")
    p.add_argument("--log", help="per-step metrics as JSON lines")

    p = add("sweep-lambda", cmd_sweep_lambda, "train one head per lambda")
    _add_train_flags(p, seed)
    p.add_argument("--lambdas", default="0,0.05,0.1,0.5")

    p = add("compare-losses", cmd_compare_losses, "train one head per local loss")
    _add_train_flags(p, seed)
    p.add_argument("--losses", default="kl,topk:3,cosine")

    p = add("select-hard", cmd_select_hard, "pick the instances that get attention supervision")
    _add_train_flags(p, seed)
    p.set_defaults(selection=tr.MISMATCH_FIRST, fraction=0.25)
    p.add_argument("--head", help="checkpoint to score mismatch with (default: the initial head)")
    p.add_argument("--out", required=True)

    p = add("eval-ndcg", cmd_eval_ndcg, "mean nDCG@k of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=5)

    p = add("eval-coverage", cmd_eval_coverage, "coverage@K%% of maps over annotations")
    p.add_argument("--maps", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--k-percent", type=float, default=3.0)

    p = add("eval-iou", cmd_eval_iou, "patch IoU between two annotation files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    p = add("validate", cmd_validate, "check a store, annotation, run, qrels or manifest file")
    p.add_argument("--in", dest="input", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradients")
    p.add_argument("--loss", choices=["all", *obj.LOSS_NAMES], default="all")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--local-loss", default="cosine", help="local term of 'total'")
    p.add_argument("--seed", type=int, default=seed)

    p = add("make-planted", cmd_make_planted, "write the planted-signal corpus as a manifest")
    p.add_argument("--out", required=True, help="directory")
    p.add_argument("--pages", type=int, default=PlantedConfig.n_pages)
    p.add_argument("--queries", type=int, default=PlantedConfig.n_queries)
    p.add_argument("--seed", type=int, default=seed)
    return parser


def _error_line(exc: Exception) -> str:
    if isinstance(exc, (st.StoreError, CliError)):
        code, record = exc.code, exc.record
    elif isinstance(exc, DatasetError):
        code, record = "invalid-manifest", None
    elif isinstance(exc, ValidationError):
        code, record = "invalid-record", None
    elif isinstance(exc, FileNotFoundError):
        code, record = "not-found", None
    else:
        code, record = type(exc).__name__, None
    return json.dumps({"error": code, "record": record, "message": str(exc)}, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError, CliError, tr.TrainingDiverged, FloatingPointError) as exc:
        sys.stderr.write(_error_line(exc) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
