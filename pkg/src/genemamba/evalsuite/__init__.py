"""Evaluation metrics: reconstruction, integration, and gene-pair analyses."""

from genemamba.evalsuite.correlation import (
    distribution_distances,
    jaccard_distance,
    pair_similarity_report,
    topology_adjacency,
)
from genemamba.evalsuite.integration import (
    ari,
    asw_batch,
    asw_cell,
    avg_batch,
    avg_bio,
    graph_conn,
    nmi,
    silhouette,
)
from genemamba.evalsuite.reconstruct import reconstruct, reconstruct_dataset
from genemamba.evalsuite.report import MetricReport
from genemamba.evalsuite.sequence import bleu, em_avg, exact_match, levenshtein, nld, spearman
from genemamba.evalsuite.suites import evaluate_integration, evaluate_pairs, evaluate_reconstruction

__all__ = [
    "MetricReport",
    "ari",
    "asw_batch",
    "asw_cell",
    "avg_batch",
    "avg_bio",
    "bleu",
    "distribution_distances",
    "em_avg",
    "evaluate_integration",
    "evaluate_pairs",
    "evaluate_reconstruction",
    "exact_match",
    "graph_conn",
    "jaccard_distance",
    "levenshtein",
    "nld",
    "nmi",
    "pair_similarity_report",
    "reconstruct",
    "reconstruct_dataset",
    "silhouette",
    "spearman",
    "topology_adjacency",
]
