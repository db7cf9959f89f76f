"""Synthetic desk-scale corpora with known structure.

Everything is driven by an explicit seed so tests and CLI demos are
reproducible.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from genemamba.corpus import N_SPECIAL, ExpressionMatrix, TokenizedDataset
from genemamba.objectives import PathwaySet


def expression_matrix(
    n_cells: int = 300,
    n_genes: int = 120,
    n_types: int = 3,
    n_batches: int = 2,
    markers_per_type: int = 8,
    depth: float = 2000.0,
    batch_shift: float = 0.3,
    seed: int = 0,
) -> ExpressionMatrix:
    """Poisson counts with per-type marker genes and multiplicative batch effects.

    Labels ``celltype`` and ``batch`` are attached as cell metadata.
    """
    rng = np.random.default_rng(seed)
    base = rng.gamma(0.6, 1.0, size=n_genes)
    profiles = np.tile(base, (n_types, 1))
    genes = rng.permutation(n_genes)
    for t in range(n_types):
        markers = genes[t * markers_per_type : (t + 1) * markers_per_type]
        profiles[t, markers] *= 12.0
    batch_fx = np.exp(rng.normal(0, batch_shift, size=(n_batches, n_genes)))
    types = rng.integers(0, n_types, size=n_cells)
    batches = rng.integers(0, n_batches, size=n_cells)
    rates = profiles[types] * batch_fx[batches]
    rates = rates / rates.sum(axis=1, keepdims=True) * depth * rng.uniform(0.6, 1.4, (n_cells, 1))
    counts = rng.poisson(rates).astype(float)
    meta = {
        "celltype": [f"type{t}" for t in types],
        "batch": [f"batch{b}" for b in batches],
    }
    gene_ids = [f"G{j:04d}" for j in range(n_genes)]
    return ExpressionMatrix(sp.csr_matrix(counts), gene_ids, cell_meta=meta)


def random_token_corpus(n_cells: int, vocab_size: int, seq_len: int, seed: int = 0,
                        vary_length: bool = False) -> TokenizedDataset:
    """Cells as random orderings of distinct gene tokens."""
    rng = np.random.default_rng(seed)
    genes = np.arange(N_SPECIAL, vocab_size)
    seqs = []
    for _ in range(n_cells):
        k = int(rng.integers(max(2, seq_len // 2), seq_len + 1)) if vary_length else seq_len
        seqs.append(rng.choice(genes, size=k, replace=False))
    return TokenizedDataset(seqs, seq_len, 0)


def planted_pathways(vocab_size: int, n_pathways: int = 4, genes_per_pathway: int = 6,
                     seed: int = 0) -> PathwaySet:
    """Disjoint pathways over randomly chosen gene tokens."""
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.arange(N_SPECIAL, vocab_size), size=n_pathways * genes_per_pathway, replace=False)
    member = {}
    for p in range(n_pathways):
        for g in chosen[p * genes_per_pathway : (p + 1) * genes_per_pathway]:
            member[int(g)] = {f"P{p}"}
    return PathwaySet(member)


def pathway_corpus(n_cells: int, vocab_size: int, seq_len: int, pathways: PathwaySet,
                   seed: int = 0) -> TokenizedDataset:
    """Random cells that each contain every pathway gene at random positions.

    Pathway genes are not co-ordered, so sequence statistics alone carry no
    pathway signal; only the contrastive term can separate them.
    """
    rng = np.random.default_rng(seed)
    pw_genes = np.array(sorted(pathways.membership))
    others = np.setdiff1d(np.arange(N_SPECIAL, vocab_size), pw_genes)
    n_other = seq_len - pw_genes.size
    if n_other < 0:
        raise ValueError("seq_len too short for all pathway genes")
    seqs = []
    for _ in range(n_cells):
        cell = np.concatenate([pw_genes, rng.choice(others, size=n_other, replace=False)])
        seqs.append(rng.permutation(cell))
    return TokenizedDataset(seqs, seq_len, 0)


def class_signature_corpus(n_per_class: int, n_classes: int, vocab_size: int, seq_len: int,
                           signature_len: int = 3, seed: int = 0) -> TokenizedDataset:
    """Labelled cells whose top-ranked tokens are a class-specific signature."""
    rng = np.random.default_rng(seed)
    genes = np.arange(N_SPECIAL, vocab_size)
    sig_pool = rng.choice(genes, size=n_classes * signature_len, replace=False)
    rest = np.setdiff1d(genes, sig_pool)
    seqs, labels = [], []
    for c in range(n_classes):
        sig = sig_pool[c * signature_len : (c + 1) * signature_len]
        for _ in range(n_per_class):
            tail = rng.choice(rest, size=seq_len - signature_len, replace=False)
            seqs.append(np.concatenate([rng.permutation(sig), tail]))
            labels.append(f"class{c}")
    order = rng.permutation(len(seqs))
    return TokenizedDataset(
        [seqs[i] for i in order], seq_len, 0, labels={"celltype": [labels[i] for i in order]}
    )
