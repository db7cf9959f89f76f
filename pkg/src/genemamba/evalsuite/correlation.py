"""Gene-pair similarity distributions and embedding topology comparisons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from genemamba.errors import InputError

HIST_BINS = 50
HIST_RANGE = (-1.0, 1.0)
SMOOTHING = 1e-9


@dataclass
class PairScores:
    cosine_pos: np.ndarray
    cosine_neg: np.ndarray
    pearson_pos: np.ndarray
    pearson_neg: np.ndarray

    def summary(self) -> dict:
        def mean(a):
            return float(np.mean(a)) if a.size else float("nan")

        return {
            "cosine_pos_mean": mean(self.cosine_pos),
            "cosine_neg_mean": mean(self.cosine_neg),
            "pearson_pos_mean": mean(self.pearson_pos),
            "pearson_neg_mean": mean(self.pearson_neg),
            "n_pos": int(self.cosine_pos.size),
            "n_neg": int(self.cosine_neg.size),
        }


def _cosine(a, b):
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise InputError("cosine similarity of a zero vector")
    return np.sum(a * b, axis=-1) / (na * nb)


def _pearson(a, b):
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    return _cosine(a, b)


def pair_similarity_report(embeddings, pairs) -> PairScores:
    """Cosine and Pearson scores for labelled gene pairs.

    ``embeddings`` maps a gene key to a vector (dict or 2-D array indexed by
    integer keys); ``pairs`` is an iterable of ``(gene_a, gene_b, label)``
    with label 1 for positive pairs and 0 for negatives.
    """
    pairs = list(pairs)
    if not pairs:
        raise InputError("no gene pairs to score")
    a = np.array([np.asarray(embeddings[p[0]], dtype=float) for p in pairs])
    b = np.array([np.asarray(embeddings[p[1]], dtype=float) for p in pairs])
    lab = np.array([int(p[2]) for p in pairs], dtype=bool)
    cos = _cosine(a, b)
    pear = _pearson(a, b)
    return PairScores(cos[lab], cos[~lab], pear[lab], pear[~lab])


def histogram(scores, bins: int = HIST_BINS, value_range=HIST_RANGE):
    """Normalized histogram; returns (probabilities, bin edges)."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise InputError("empty score set")
    counts, edges = np.histogram(np.clip(scores, *value_range), bins=bins, range=value_range)
    return counts / counts.sum(), edges


def smooth(p, eps: float = SMOOTHING):
    q = np.asarray(p, dtype=float) + eps
    return q / q.sum()


def kl_divergence(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def js_divergence(p, q) -> float:
    m = (np.asarray(p, float) + np.asarray(q, float)) / 2
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def histogram_distances(p, q, eps: float = SMOOTHING):
    """(Euclidean, KL(p||q), JS) between two normalized histograms.

    The Euclidean term uses the raw histograms; both divergences use the
    additively smoothed, renormalized versions.
    """
    euclid = float(np.linalg.norm(np.asarray(p, float) - np.asarray(q, float)))
    ps, qs = smooth(p, eps), smooth(q, eps)
    return euclid, kl_divergence(ps, qs), js_divergence(ps, qs)


def distribution_distances(pos_scores, neg_scores, bins: int = HIST_BINS,
                           value_range=HIST_RANGE, eps: float = SMOOTHING):
    p, _ = histogram(pos_scores, bins, value_range)
    q, _ = histogram(neg_scores, bins, value_range)
    return histogram_distances(p, q, eps)


def distance_matrix(embeddings) -> np.ndarray:
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("need at least two embeddings")
    return squareform(pdist(x, metric="euclidean"))


def topology_adjacency(embeddings) -> np.ndarray:
    """Edge where pairwise distance falls below the mean off-diagonal distance."""
    d = distance_matrix(embeddings)
    off = ~np.eye(d.shape[0], dtype=bool)
    adj = (d < d[off].mean()) & off
    return adj


def jaccard_distance(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InputError("adjacency matrices differ in shape")
    iu = np.triu_indices(a.shape[0], k=1)
    ea, eb = a[iu], b[iu]
    union = np.sum(ea | eb)
    if union == 0:
        return 0.0
    return 1.0 - np.sum(ea & eb) / union
