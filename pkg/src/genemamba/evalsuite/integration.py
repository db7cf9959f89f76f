"""Batch-integration metrics: biological conservation and batch mixing."""

from __future__ import annotations

import networkx as nx
import numpy as np
from scipy.sparse.csgraph import connected_components
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score, silhouette_score
from sklearn.neighbors import NearestNeighbors

from genemamba.errors import InputError

DEFAULT_K = 15


def ari(labels_true, labels_pred) -> float:
    return float(adjusted_rand_score(labels_true, labels_pred))


def nmi(labels_true, labels_pred) -> float:
    """2 I(Y;C) / (H(Y) + H(C)), i.e. arithmetic-mean normalization."""
    return float(normalized_mutual_info_score(labels_true, labels_pred, average_method="arithmetic"))


def silhouette(embeddings, labels) -> float:
    n_labels = len(set(labels))
    if not 2 <= n_labels <= len(labels) - 1:
        raise InputError(f"silhouette needs 2..n-1 distinct labels, got {n_labels}")
    return float(silhouette_score(np.asarray(embeddings, dtype=float), np.asarray(labels), metric="euclidean"))


def asw_cell(embeddings, cell_labels) -> float:
    return (silhouette(embeddings, cell_labels) + 1) / 2


def asw_batch(embeddings, batch_labels) -> float:
    return 1 - abs(silhouette(embeddings, batch_labels))


def knn_graph(x: np.ndarray, k: int):
    """Symmetrized kNN adjacency (self excluded) as a scipy sparse matrix."""
    import scipy.sparse as sp

    n = x.shape[0]
    k = min(k, n - 1)
    if k < 1:
        return sp.csr_matrix((n, n))
    nn = NearestNeighbors(n_neighbors=k + 1).fit(x)
    _, idx = nn.kneighbors(x)
    rows, cols = [], []
    for i in range(n):
        nbrs = [j for j in idx[i] if j != i][:k]
        rows.extend([i] * len(nbrs))
        cols.extend(nbrs)
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return ((adj + adj.T) > 0).astype(float)


def graph_conn(embeddings, cell_labels, k: int = DEFAULT_K) -> float:
    """Mean over cell types of |largest kNN component| / |type|."""
    x = np.asarray(embeddings, dtype=float)
    labels = np.asarray(cell_labels)
    scores = []
    for c in sorted(set(labels.tolist())):
        sub = x[labels == c]
        if sub.shape[0] == 1:
            scores.append(1.0)
            continue
        _, comp = connected_components(knn_graph(sub, k), directed=False)
        scores.append(np.bincount(comp).max() / sub.shape[0])
    return float(np.mean(scores))


def avg_bio(ari_cell: float, nmi_cell: float, asw_cell_value: float) -> float:
    return (ari_cell + nmi_cell + asw_cell_value) / 3


def avg_batch(asw_batch_value: float, graph_conn_value: float) -> float:
    return (asw_batch_value + graph_conn_value) / 2


def cluster_labels(embeddings, k: int = DEFAULT_K, seed: int = 0, resolution: float = 1.0) -> list[int]:
    """Louvain communities on the kNN graph of the embeddings."""
    adj = knn_graph(np.asarray(embeddings, dtype=float), k)
    g = nx.from_scipy_sparse_array(adj)
    comms = nx.community.louvain_communities(g, seed=seed, resolution=resolution)
    out = np.empty(adj.shape[0], dtype=int)
    for cid, members in enumerate(sorted(comms, key=lambda s: min(s))):
        out[list(members)] = cid
    return out.tolist()
