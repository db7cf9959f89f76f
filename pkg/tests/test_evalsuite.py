import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from genemamba import synthetic
from genemamba.bimamba import ModelConfig, build_model
from genemamba.embeddings import EmbeddingTable, embed_cells, embed_genes
from genemamba.errors import DataError, InputError, NumericError
from genemamba.evalsuite import correlation, integration, plots
from genemamba.evalsuite import sequence as seqm
from genemamba.evalsuite.reconstruct import (
    aligned_spearman,
    greedy_decode,
    reconstruct_batch,
    score_pair,
)
from genemamba.evalsuite.report import MetricReport, parse_lines, write_table
from genemamba.evalsuite.suites import evaluate_integration, evaluate_pairs, evaluate_reconstruction

token_lists = st.lists(st.integers(0, 5), max_size=10)


# --- sequence metrics

def test_levenshtein_kitten():
    assert seqm.levenshtein("kitten", "sitting") == 3
    assert seqm.nld("kitten", "sitting") == pytest.approx(1 - 3 / 7)
    assert seqm.nld([], []) == 1.0


def test_bleu_half_length_unigram():
    ref = list(range(10))
    assert seqm.bleu(ref[:5], ref, max_n=1) == pytest.approx(math.exp(-1), abs=1e-12)
    assert seqm.bleu(ref, ref) == 1.0
    assert seqm.bleu([1, 2], [1, 2, 3]) == 0.0  # no 3-grams in candidate


def test_exact_match_average():
    assert seqm.em_avg([([1, 2], [1, 2]), ([1], [2])]) == 0.5


@given(token_lists, token_lists)
def test_levenshtein_matches_recursion(a, b):
    assert seqm.levenshtein(a, b) == oracles.levenshtein_rec(a, b)


@given(token_lists, token_lists, token_lists)
def test_levenshtein_metric_axioms(a, b, c):
    d = seqm.levenshtein
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=10), token_lists)
def test_bleu_matches_brute_and_range(cand, ref):
    v = seqm.bleu(cand, ref)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(oracles.bleu_brute(cand, ref), abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.floats(-5, 5), min_size=len(a), max_size=len(a)))))
def test_spearman_matches_brute(ab):
    a, b = ab
    got = seqm.spearman(a, b)
    if len(set(a)) == 1 or len(set(b)) == 1:
        assert math.isnan(got)
    else:
        assert got == pytest.approx(oracles.spearman_brute(a, b), abs=1e-10)


# --- integration metrics

def test_ari_small_by_hand():
    # contingency [[1,1],[0,2]]: sum C(n_ij,2)=1, rows 1+1=2, cols 0+3=3
    expected = (1 - 2 * 3 / 6) / (0.5 * (2 + 3) - 2 * 3 / 6)
    assert integration.ari([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(expected)
    assert integration.ari([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0


def test_nmi_six_points():
    a = [0, 0, 0, 1, 1, 1]
    b = [0, 0, 1, 1, 2, 2]
    assert integration.nmi(a, b) == pytest.approx(oracles.nmi_entropy(a, b), abs=1e-12)
    assert integration.nmi(a, a) == pytest.approx(1.0)


def test_graph_conn_split_halves():
    # type 0 forms two far-apart pairs; with k=1 the largest component holds half
    x = np.array([[0, 0], [0, 0.1], [10, 0], [10, 0.1], [5, 5], [5, 5.1]])
    labels = [0, 0, 0, 0, 1, 1]
    assert integration.graph_conn(x, labels, k=1) == pytest.approx((0.5 + 1.0) / 2)


labelings = st.lists(st.integers(0, 3), min_size=2, max_size=12)


@given(labelings, st.data())
def test_ari_nmi_oracles_and_relabel(a, data):
    b = data.draw(st.lists(st.integers(0, 3), min_size=len(a), max_size=len(a)))
    assert integration.ari(a, b) == pytest.approx(oracles.ari_pairs(a, b), abs=1e-10)
    assert integration.nmi(a, b) == pytest.approx(oracles.nmi_entropy(a, b), abs=1e-10)
    perm = {v: 10 + (v * 3) % 7 for v in range(4)}
    b2 = [perm[v] for v in b]
    assert integration.ari(a, b2) == pytest.approx(integration.ari(a, b), abs=1e-12)
    assert integration.nmi(a, b2) == pytest.approx(integration.nmi(a, b), abs=1e-12)
    assert -1 <= integration.ari(a, b) <= 1 and 0 <= integration.nmi(a, b) <= 1 + 1e-12


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(3, 12), st.integers(1, 5))
def test_graph_conn_oracle_and_monotone(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    labels = rng.integers(0, 2, n).tolist()
    g = integration.graph_conn(x, labels, k)
    assert g == pytest.approx(oracles.graph_conn_brute(x, labels, k), abs=1e-10)
    assert 0 < g <= 1
    assert integration.graph_conn(x, labels, k + 1) >= g - 1e-12


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(3, 12))
def test_silhouette_oracle_and_ranges(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    labels = [i % 2 for i in range(n)]
    s = integration.silhouette(x, labels)
    assert s == pytest.approx(oracles.silhouette_brute(x, labels), abs=1e-10)
    assert 0 <= integration.asw_cell(x, labels) <= 1
    assert 0 <= integration.asw_batch(x, labels) <= 1


def test_silhouette_needs_two_labels():
    with pytest.raises(InputError):
        integration.silhouette(np.zeros((3, 2)), [0, 0, 0])


def test_avg_scores():
    assert integration.avg_bio(0.3, 0.6, 0.9) == pytest.approx(0.6)
    assert integration.avg_batch(0.2, 0.4) == pytest.approx(0.3)


def test_cluster_labels_recovers_blobs():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    lab = integration.cluster_labels(x, k=5, seed=0)
    # communities may subdivide a blob but never span both
    assert not set(lab[:20]) & set(lab[20:])
    assert lab == integration.cluster_labels(x, k=5, seed=0)


# --- correlation / distribution metrics

def test_distribution_distances_by_hand():
    eps = 1e-3
    euc, kl, js = correlation.histogram_distances([0.5, 0.5], [1.0, 0.0], eps)
    p = np.array([0.5 + eps, 0.5 + eps]) / (1 + 2 * eps)
    q = np.array([1 + eps, eps]) / (1 + 2 * eps)
    m = (p + q) / 2
    kl_ref = float(np.sum(p * np.log(p / q)))
    js_ref = 0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m))
    assert euc == pytest.approx(math.sqrt(0.5))
    assert kl == pytest.approx(kl_ref, abs=1e-12)
    assert js == pytest.approx(js_ref, abs=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.lists(st.floats(-1, 1), min_size=1, max_size=30))
def test_distance_ranges(a, b):
    euc, kl, js = correlation.distribution_distances(a, b, bins=10)
    assert 0 <= euc <= math.sqrt(2) + 1e-12
    assert kl >= -1e-12
    assert -1e-12 <= js <= math.log(2) + 1e-12
    same = correlation.distribution_distances(a, a, bins=10)
    assert same[0] == 0 and abs(same[1]) < 1e-12 and abs(same[2]) < 1e-12


def test_pair_scores_and_zero_vector():
    emb = {"a": np.array([1.0, 0, 0]), "b": np.array([2.0, 0, 0]), "c": np.array([0, 1.0, 0])}
    s = correlation.pair_similarity_report(emb, [("a", "b", 1), ("a", "c", 0)])
    assert s.cosine_pos.tolist() == [1.0] and s.cosine_neg.tolist() == [0.0]
    emb["z"] = np.zeros(3)
    with pytest.raises(InputError):
        correlation.pair_similarity_report(emb, [("a", "z", 1)])


def test_topology_four_genes():
    x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    adj = correlation.topology_adjacency(x)
    expected = np.zeros((4, 4), bool)
    expected[0, 1] = expected[1, 0] = expected[2, 3] = expected[3, 2] = True
    assert np.array_equal(adj, expected)
    assert correlation.jaccard_distance(adj, adj) == 0.0
    other = expected.copy()
    other[2, 3] = other[3, 2] = False
    assert correlation.jaccard_distance(adj, other) == 0.5


# --- reconstruction

def test_greedy_decode_never_repeats():
    logits = np.zeros((3, 6))
    logits[:, 4] = 5.0
    logits[:, 0] = 9.0  # special tokens are never emitted
    out = greedy_decode(logits, 3)
    assert out[0] == 4 and len(set(out.tolist())) == 3 and out.min() >= 2


def test_perfect_reconstruction_scores():
    c = score_pair("x", [5, 4, 3], [5, 4, 3])
    assert (c.em, c.ld, c.nld, c.bleu, c.spearman) == (1, 0, 1.0, 0.0, 1.0)
    # BLEU-4 of a length-3 sequence has no 4-grams, so it is 0
    c = score_pair("x", list(range(2, 8)), list(range(2, 8)))
    assert c.bleu == 1.0
    assert math.isnan(aligned_spearman([3], [3]))


def test_aligned_spearman_missing_gene_scores_zero():
    # reversed order gives -1; a dropped gene sinks to the bottom
    assert aligned_spearman([2, 3, 4], [4, 3, 2]) == pytest.approx(-1.0)
    assert aligned_spearman([2, 3, 4], [2, 3, 9]) == pytest.approx(1.0)


def test_reconstruction_suite_on_overfit_model():
    torch.manual_seed(0)
    ds = synthetic.random_token_corpus(8, 20, 6, seed=0)
    model = build_model(ModelConfig(vocab_size=20, d_model=16, n_layers=1), seed=0)
    outs = reconstruct_batch(model, ds.sequences)
    assert all(len(o) == len(s) for o, s in zip(outs, ds.sequences))
    res = evaluate_reconstruction(model, ds)
    m = res.report.metrics
    assert 0 <= m["nld"] <= 1 and m["n_cells"] == 8
    venn = res.tables["venn"][1][0]
    assert venn[0] == venn[2]  # same length outputs of distinct genes


# --- reports, suites, embeddings, plots

def test_report_round_trips(tmp_path):
    r = MetricReport({"ari": 0.5, "spearman": float("nan"), "ld": 3.0}, "d", "m", {"k": 15})
    again = MetricReport.from_json(r.to_json())
    assert again.to_json() == r.to_json()
    parsed = parse_lines(r.to_lines())
    assert parsed["ari"] == 0.5 and math.isnan(parsed["spearman"])
    with pytest.raises(NumericError):
        MetricReport({"nmi": 1.5}).validate()
    write_table(tmp_path / "t.tsv", ["a", "b"], [[1, 0.1]])
    assert (tmp_path / "t.tsv").read_text() == "a\tb\n1\t0.1\n"


def test_integration_suite_skips_batch_metrics():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(0, 1, (15, 4)), rng.normal(8, 1, (15, 4))])
    labels = ["a"] * 15 + ["b"] * 15
    res = evaluate_integration(x, labels, batch_labels=["b1"] * 30, k=5)
    assert "asw_batch" not in res.report.metrics
    assert "skipped" in res.report.params["batch_metrics"]
    res = evaluate_integration(x, labels, batch_labels=["b1", "b2"] * 15, k=5)
    assert {"asw_batch", "graph_conn", "avg_batch"} <= set(res.report.metrics)
    assert res.report.metrics["ari"] == 1.0


def test_pair_suite_and_plots(tmp_path):
    rng = np.random.default_rng(2)
    base = rng.normal(size=8)
    emb = {f"g{i}": base + 0.1 * rng.normal(size=8) for i in range(4)}
    emb.update({f"h{i}": rng.normal(size=8) for i in range(4)})
    pairs = [("g0", "g1", 1), ("g2", "g3", 1), ("g0", "h0", 0), ("h1", "h2", 0), ("h3", "g3", 0)]
    res = evaluate_pairs(emb, pairs, bins=10)
    assert res.report.metrics["cosine_pos_mean"] > res.report.metrics["cosine_neg_mean"]
    a = plots.plot_histograms(tmp_path / "a.png", res.tables["hist"])
    b = plots.plot_histograms(tmp_path / "b.png", res.tables["hist"])
    assert a.read_bytes() == b.read_bytes() and a.read_bytes()[:4] == b"\x89PNG"


def test_embedding_file_round_trip_and_passes(tmp_path):
    t = EmbeddingTable(["c1", "ç2"], np.arange(6).reshape(2, 3))
    t.save(tmp_path / "e")
    back = EmbeddingTable.load(tmp_path / "e")
    assert back.ids == t.ids and np.array_equal(back.values, t.values)
    with pytest.raises(DataError):
        EmbeddingTable.from_bytes((tmp_path / "e").read_bytes()[:-1])
    ds = synthetic.random_token_corpus(5, 20, 6, seed=0, vary_length=True)
    model = build_model(ModelConfig(vocab_size=20, d_model=8, n_layers=1), seed=0)
    assert embed_cells(model, ds, "mean", batch_size=2).shape == (5, 8)
    genes, vecs = embed_genes(model, ds)
    assert vecs.shape == (len(genes), 8) and genes.min() >= 2
