"""Grouped evaluations that produce a MetricReport plus plotting data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from genemamba.errors import InputError
from genemamba.evalsuite import correlation, integration
from genemamba.evalsuite.reconstruct import ReconstructionSummary, reconstruct_dataset
from genemamba.evalsuite.report import MetricReport


@dataclass
class SuiteResult:
    report: MetricReport
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    extra: dict = field(default_factory=dict)


def evaluate_integration(embeddings, cell_labels, batch_labels=None, predicted=None,
                         k: int = integration.DEFAULT_K, seed: int = 0) -> SuiteResult:
    """AvgBIO components always; AvgBatch components when two or more batches exist.

    ARI/NMI compare the true cell labels with ``predicted`` when given, and
    otherwise with Louvain communities of the embedding kNN graph.
    """
    x = np.asarray(embeddings, dtype=float)
    labels = list(cell_labels)
    if x.shape[0] != len(labels):
        raise InputError("embedding rows and labels differ in count")
    if predicted is None:
        clusters = integration.cluster_labels(x, k=k, seed=seed)
        source = "louvain"
    else:
        clusters = list(predicted)
        source = "predicted"
    m = {}
    m["ari"] = integration.ari(labels, clusters)
    m["nmi"] = integration.nmi(labels, clusters)
    m["asw_cell"] = integration.asw_cell(x, labels)
    m["avg_bio"] = integration.avg_bio(m["ari"], m["nmi"], m["asw_cell"])
    params = {"k": k, "cluster_source": source, "seed": seed, "metric": "euclidean"}
    if batch_labels is not None and len(set(batch_labels)) >= 2:
        m["asw_batch"] = integration.asw_batch(x, list(batch_labels))
        m["graph_conn"] = integration.graph_conn(x, labels, k)
        m["avg_batch"] = integration.avg_batch(m["asw_batch"], m["graph_conn"])
    else:
        params["batch_metrics"] = "skipped: fewer than two batches"
    report = MetricReport(m, params=params)
    report.validate()
    rows = [[i, labels[i], clusters[i]] for i in range(len(labels))]
    return SuiteResult(report, {"clusters": (["row", "cell_label", "cluster"], rows)})


def evaluate_reconstruction(model, dataset, batch_size: int = 32) -> SuiteResult:
    summary: ReconstructionSummary = reconstruct_dataset(model, dataset, batch_size)
    report = MetricReport(summary.metrics(), params={"decode": "greedy_no_repeat", "ld": "mean over cells"})
    report.validate()
    venn = summary.venn_counts()
    cells = [
        [c.cell_id, c.em, c.ld, float(c.nld), float(c.bleu), float(c.spearman),
         " ".join(map(str, c.output.tolist()))]
        for c in summary.cells
    ]
    tables = {
        "cells": (["cell_id", "em", "ld", "nld", "bleu", "spearman", "output"], cells),
        "venn": (["input_only", "shared", "output_only"], [[venn["input_only"], venn["shared"], venn["output_only"]]]),
        "ranks": (["input_rank", "output_rank"], summary.rank_pairs().tolist()),
    }
    return SuiteResult(report, tables, {"summary": summary})


def evaluate_pairs(gene_embeddings: dict, pairs, bins: int = correlation.HIST_BINS,
                   eps: float = correlation.SMOOTHING) -> SuiteResult:
    """Positive/negative pair score distributions and their separation."""
    pairs = [p for p in pairs if p[0] in gene_embeddings and p[1] in gene_embeddings]
    if not pairs:
        raise InputError("no labelled pair has embeddings for both genes")
    scores = correlation.pair_similarity_report(gene_embeddings, pairs)
    m = dict(scores.summary())
    hists = {}
    edges = None
    for kind in ("cosine", "pearson"):
        pos, neg = getattr(scores, f"{kind}_pos"), getattr(scores, f"{kind}_neg")
        if pos.size == 0 or neg.size == 0:
            raise InputError("need both positive and negative pairs")
        p, edges = correlation.histogram(pos, bins)
        q, _ = correlation.histogram(neg, bins)
        euc, kl, js = correlation.histogram_distances(p, q, eps)
        m[f"{kind}_euclidean"] = euc
        m[f"{kind}_kl"] = kl
        m[f"{kind}_js"] = js
        hists[f"{kind}_pos"], hists[f"{kind}_neg"] = p, q
    report = MetricReport(m, params={"bins": bins, "range": list(correlation.HIST_RANGE), "smoothing": eps})
    report.validate()
    names = list(hists)
    rows = [[float(edges[i]), float(edges[i + 1]), *(float(hists[k][i]) for k in names)] for i in range(bins)]
    return SuiteResult(report, {"hist": (["bin_lo", "bin_hi", *names], rows)}, {"scores": scores})
