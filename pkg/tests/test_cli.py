import json

import numpy as np
import pytest

from attnguide import attention as att
from attnguide import storage as st
from attnguide.cli import format_table, layer_stacks, main
from attnguide.core import (
    AnnotationSet,
    AttentionMap,
    Box,
    Kind,
    LayerAttentionStack,
    PatchGrid,
    Provenance,
    seeded_random_matrix,
    splitmix_uniform,
)
from attnguide.dataset import DatasetError, load_manifest, save_manifest
from attnguide.evaluation import Qrels, RunFile
from attnguide.late_interaction import maxsim_score, retrieve, similarity_map
from attnguide.planted import PlantedConfig, make_planted_corpus
from attnguide.trainer import MISMATCH_FIRST, ProjectionHead, TrainConfig, select_supervised, train


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rand_map(seed, h, w, qid="q", pid="p", **kw):
    return AttentionMap(PatchGrid(h, w), splitmix_uniform(seed, h * w) + 0.01, qid, pid, **kw)


@pytest.fixture(scope="module")
def planted_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("planted")
    save_manifest(make_planted_corpus(PlantedConfig(n_pages=40, n_queries=20, seed=4)), root)
    return root


@pytest.fixture
def stores(tmp_path):
    queries = [seeded_random_matrix(3, 8, 10 + i, id=f"q{i}", kind=Kind.QUERY) for i in range(3)]
    pages = [seeded_random_matrix(6, 8, 50 + i, id=f"p{i}") for i in range(7)]
    st.write_embedding_store(tmp_path / "q.mve", queries)
    st.write_embedding_store(tmp_path / "p.mve", pages)
    return tmp_path, queries, pages


# --- contracts --------------------------------------------------------------


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_truncated_store_names_record(tmp_path, capsys):
    mats = [seeded_random_matrix(2, 3, i, id=f"m{i}") for i in range(3)]
    buf = st.encode_embedding_store(mats)
    (tmp_path / "corrupt.mve").write_bytes(buf[:-5])
    code, _, err = run(["validate", "--in", tmp_path / "corrupt.mve"], capsys)
    assert code == 1
    assert len(err.strip().splitlines()) == 1
    msg = json.loads(err)
    assert msg["error"] == "truncated" and msg["record"] == 2


def test_magic_mismatch_code(tmp_path, capsys):
    (tmp_path / "x.mve").write_bytes(b"MVE9" + bytes(15))
    code, _, err = run(["validate", "--in", tmp_path / "x.mve"], capsys)
    assert code == 1
    assert json.loads(err)["error"] == "magic-mismatch"
    code, _, err = run(["downsample", "--in", tmp_path / "x.mve", "--target", "1x1", "--out", tmp_path / "y"], capsys)
    assert code == 1 and json.loads(err)["error"] == "magic-mismatch"


def test_validate_kinds(tmp_path, stores, capsys, planted_dir):
    root = stores[0]
    code, out, _ = run(["validate", "--in", root / "p.mve", "--json"], capsys)
    assert code == 0 and json.loads(out) == {"kind": "embedding-store", "records": 7, "dim": 8, "valid": True}
    code, out, _ = run(["validate", "--in", planted_dir / "manifest.json", "--json"], capsys)
    assert code == 0 and json.loads(out)["kind"] == "manifest"
    code, out, _ = run(["validate", "--in", planted_dir / "qrels.tsv", "--json"], capsys)
    assert code == 0 and json.loads(out)["kind"] == "qrels"


# --- thin wrappers ----------------------------------------------------------


def test_downsample_matches_library(tmp_path, capsys):
    maps = [rand_map(1, 48, 64, "q1", "p1"), rand_map(2, 48, 64, "q2", "p2")]
    st.write_attention_store(tmp_path / "a.att", maps)
    code, _, _ = run(["downsample", "--in", tmp_path / "a.att", "--target", "24x32", "--out", tmp_path / "b.att"], capsys)
    assert code == 0
    loaded = st.read_attention_store(tmp_path / "a.att").maps
    expected = st.encode_attention_store([att.downsample(m, PatchGrid(24, 32)) for m in loaded])
    assert (tmp_path / "b.att").read_bytes() == expected
    assert all(m.grid == PatchGrid(24, 32) for m in st.read_attention_store(tmp_path / "b.att").maps)


def test_eval_ndcg_rank_two(tmp_path, capsys):
    st.write_run(tmp_path / "r.tsv", RunFile({"q": [("d2", 2.0), ("d1", 1.0)]}))
    st.write_qrels(tmp_path / "q.tsv", Qrels.from_triples([("q", "d1", 1)]))
    code, out, _ = run(["eval-ndcg", "--run", tmp_path / "r.tsv", "--qrels", tmp_path / "q.tsv", "--k", 5], capsys)
    assert code == 0
    assert float(out.split("\t")[1]) == pytest.approx(0.6309, abs=1e-4)
    code, out, _ = run(["eval-ndcg", "--run", tmp_path / "r.tsv", "--qrels", tmp_path / "q.tsv", "--json"], capsys)
    assert json.loads(out)["mean"] == pytest.approx(0.6309297535714575)


def test_score_and_retrieve(stores, capsys):
    root, queries, pages = stores
    code, out, _ = run(["score", "--queries", root / "q.mve", "--pages", root / "p.mve", "--query", "q1", "--json"], capsys)
    rows = json.loads(out)
    assert code == 0 and len(rows) == 7
    assert rows[3]["score"] == maxsim_score(queries[1], pages[3]).score
    code, _, _ = run(["retrieve", "--queries", root / "q.mve", "--pages", root / "p.mve", "--k", 3, "--out", root / "r.tsv"], capsys)
    got = st.read_run(root / "r.tsv").rankings
    for q in queries:
        assert got[q.id] == [(r.page_id, r.score) for r in retrieve(q, pages, 3)]
    code, _, err = run(["score", "--queries", root / "q.mve", "--pages", root / "p.mve", "--query", "nope"], capsys)
    assert code == 1 and json.loads(err)["error"] == "unknown-id"


def test_simmap_matches_library(stores, capsys):
    root, queries, pages = stores
    st.write_qrels(root / "qr.tsv", Qrels.from_triples([("q0", "p2", 1), ("q2", "p5", 1)]))
    code, _, _ = run(["simmap", "--queries", root / "q.mve", "--pages", root / "p.mve", "--grid", "2x3",
                      "--qrels", root / "qr.tsv", "--out", root / "s.att"], capsys)
    expected = [similarity_map(queries[0], pages[2], PatchGrid(2, 3)), similarity_map(queries[2], pages[5], PatchGrid(2, 3))]
    assert code == 0 and (root / "s.att").read_bytes() == st.encode_attention_store(expected)


def test_pipeline_composes_bit_exactly(tmp_path, capsys):
    layers = [
        rand_map(10 + l, 8, 12, "q1", "p1", provenance=Provenance.RAW_LAYERWISE, metadata={"layer": l}) for l in range(3)
    ]
    layers += [rand_map(20 + l, 8, 12, "q2", "p2", provenance=Provenance.RAW_LAYERWISE, metadata={"layer": l}) for l in range(2)]
    general = [rand_map(30, 8, 12, "", "p1"), rand_map(31, 8, 12, "", "p2")]
    st.write_attention_store(tmp_path / "layers.att", layers)
    st.write_attention_store(tmp_path / "general.att", general)
    assert run(["aggregate", "--in", tmp_path / "layers.att", "--out", tmp_path / "agg.att"], capsys)[0] == 0
    assert run(["refine", "--task", tmp_path / "agg.att", "--general", tmp_path / "general.att", "--out", tmp_path / "ref.att"], capsys)[0] == 0
    assert run(["downsample", "--in", tmp_path / "ref.att", "--target", "4x6", "--out", tmp_path / "low.att"], capsys)[0] == 0

    # the same chain in memory, rounding to float32 wherever a file sits in between
    stored = st.read_attention_store(tmp_path / "layers.att").maps
    gen = {m.page_id: m for m in st.read_attention_store(tmp_path / "general.att").maps}
    expected = []
    for pair in (("q1", "p1"), ("q2", "p2")):
        stack = LayerAttentionStack(tuple(m for m in stored if (m.query_id, m.page_id) == pair))
        agg = att.aggregate_layers(stack).quantized()
        ref = att.refine_pmi(agg, gen[pair[1]]).quantized()
        expected.append(att.downsample(ref, PatchGrid(4, 6)))
    assert (tmp_path / "low.att").read_bytes() == st.encode_attention_store(expected)


def test_layer_stacks_grouping():
    toks = [rand_map(i, 2, 2, metadata={"layer": i // 2}) for i in range(4)]
    (stack,) = layer_stacks(toks)
    assert stack.layers == 2 and len(stack.per_token[0]) == 2
    plain = layer_stacks([rand_map(i, 2, 2) for i in range(3)])
    assert plain[0].layers == 3 and plain[0].per_token is None


def test_refine_missing_general(tmp_path, capsys):
    st.write_attention_store(tmp_path / "t.att", [rand_map(1, 2, 2, "q", "p1")])
    st.write_attention_store(tmp_path / "g.att", [rand_map(2, 2, 2, "", "p2")])
    code, _, err = run(["refine", "--task", tmp_path / "t.att", "--general", tmp_path / "g.att", "--out", tmp_path / "o"], capsys)
    assert code == 1 and json.loads(err) == {"error": "unknown-id", "record": 0, "message": "no general attention for page 'p1'"}


def test_synth_attn_and_seed_env(tmp_path, capsys, monkeypatch):
    anns = [AnnotationSet("q", f"p{i}", PatchGrid(4, 4), (Box(0, 0, 1, 1),)) for i in range(3)]
    st.write_annotations(tmp_path / "a.json", anns)
    assert run(["synth-attn", "--annotations", tmp_path / "a.json", "--seed", 7, "--out", tmp_path / "s.att"], capsys)[0] == 0
    expected = [att.synthesize_attention(a, 1.0, 0.1, 7 + i) for i, a in enumerate(anns)]
    assert (tmp_path / "s.att").read_bytes() == st.encode_attention_store(expected)
    monkeypatch.setenv("AGREE_SEED", "7")
    assert run(["synth-attn", "--annotations", tmp_path / "a.json", "--out", tmp_path / "e.att"], capsys)[0] == 0
    assert (tmp_path / "e.att").read_bytes() == (tmp_path / "s.att").read_bytes()


def test_eval_coverage_and_iou(tmp_path, capsys):
    anns = [AnnotationSet("q", "p", PatchGrid(4, 4), (Box(0, 0, 1, 1),))]
    shifted = [AnnotationSet("q", "p", PatchGrid(4, 4), (Box(1, 0, 2, 1),))]
    st.write_annotations(tmp_path / "a.json", anns)
    st.write_annotations(tmp_path / "b.json", shifted)
    st.write_attention_store(tmp_path / "m.att", [att.synthesize_attention(anns[0], 1.0, 0.1, 0)])
    code, out, _ = run(["eval-coverage", "--maps", tmp_path / "m.att", "--annotations", tmp_path / "a.json",
                        "--k-percent", 25, "--json"], capsys)
    assert code == 0 and json.loads(out)["mean"] == 1.0
    code, out, _ = run(["eval-iou", "--a", tmp_path / "a.json", "--b", tmp_path / "b.json", "--json"], capsys)
    assert code == 0 and json.loads(out)["mean"] == pytest.approx(2 / 6)


def test_gradcheck_command(capsys, tmp_path):
    code, _, _ = run(["gradcheck", "--instances", 3, "--json", "--report", tmp_path / "g.json"], capsys)
    rows = json.loads((tmp_path / "g.json").read_text())
    assert code == 0 and [r["loss"] for r in rows] == ["global", "kl", "topk", "cosine", "total"]
    assert all(r["passed"] for r in rows)


# --- training commands ------------------------------------------------------


def test_train_matches_library(planted_dir, tmp_path, capsys):
    code, out, _ = run(["train", "--manifest", planted_dir / "manifest.json", "--epochs", 1, "--out", tmp_path / "h.npz",
                        "--log", tmp_path / "log.jsonl", "--json"], capsys)
    assert code == 0
    corpus = load_manifest(planted_dir / "manifest.json")
    lib = train(corpus.train, TrainConfig(epochs=1))
    assert np.array_equal(ProjectionHead.load(tmp_path / "h.npz").weight, lib.head.weight)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == json.loads(json.dumps(lib.log))
    assert json.loads(out)["steps"] == len(lib.log)


def test_sweep_and_compare_rerun_byte_identical(planted_dir, tmp_path, capsys):
    m = planted_dir / "manifest.json"
    for i in range(2):
        assert run(["sweep-lambda", "--manifest", m, "--epochs", 1, "--json", "--report", tmp_path / f"s{i}.json"], capsys)[0] == 0
        assert run(["compare-losses", "--manifest", m, "--epochs", 1, "--report", tmp_path / f"c{i}.txt"], capsys)[0] == 0
    assert (tmp_path / "s0.json").read_bytes() == (tmp_path / "s1.json").read_bytes()
    assert (tmp_path / "c0.txt").read_bytes() == (tmp_path / "c1.txt").read_bytes()
    rows = json.loads((tmp_path / "s0.json").read_text())
    assert [r["lambda"] for r in rows] == [0, 0.05, 0.1, 0.5]
    table = (tmp_path / "c0.txt").read_text().splitlines()
    assert table[0].split()[:2] == ["local_loss", "lambda"] and len(table) == 5


def test_select_hard_matches_library(planted_dir, tmp_path, capsys):
    m = planted_dir / "manifest.json"
    assert run(["select-hard", "--manifest", m, "--out", tmp_path / "ids.txt"], capsys)[0] == 0
    corpus = load_manifest(m)
    cfg = TrainConfig()
    head = ProjectionHead.init(corpus.train[0].query_features.shape[1], cfg.dim_out, 0, identity=True)
    expected = select_supervised(corpus.train, 0.25, MISMATCH_FIRST, head)
    assert (tmp_path / "ids.txt").read_text().split() == expected


def test_manifest_roundtrip_and_bad_references(planted_dir, tmp_path):
    corpus = load_manifest(planted_dir / "manifest.json")
    assert len(corpus.train) == 14 and len(corpus.test_queries) == 6
    doc = json.loads((planted_dir / "manifest.json").read_text())
    doc["instances"][0]["candidates"].append("p9999")
    doc["instances"][1]["attention"] = ["q-none", "p0000"]
    for name in ("queries.mve", "pages.mve", "qrels.tsv", "targets.att", "annotations.json"):
        (tmp_path / name).write_bytes((planted_dir / name).read_bytes())
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError) as exc:
        load_manifest(tmp_path / "manifest.json")
    assert len(exc.value.problems) == 2


def test_make_planted_command(tmp_path, capsys):
    code, out, _ = run(["make-planted", "--out", tmp_path / "d", "--pages", 30, "--queries", 10, "--seed", 1, "--json"], capsys)
    assert code == 0 and json.loads(out)["pages"] == 30
    assert load_manifest(tmp_path / "d" / "manifest.json").grid == PatchGrid(8, 8)


def test_format_table():
    text = format_table([{"a": 1, "b": 0.5}, {"a": 22, "b": None}])
    assert text.splitlines() == ["a   b", "--  ---", "1   0.5", "22  -"]
