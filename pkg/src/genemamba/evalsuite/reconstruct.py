"""Gene-rank reconstruction from a trained token model.

The model reads ``[CLS] + input`` once.  Output position ``j`` takes the
highest-scoring gene from the logits at position ``j`` among genes not yet
emitted, so the output is a ranking of distinct genes with the same length
as the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from genemamba.bimamba import GeneMamba, make_batch
from genemamba.corpus import N_SPECIAL, TokenSequence, TokenizedDataset
from genemamba.evalsuite import sequence as seqm


def _as_tokens(seq) -> np.ndarray:
    if isinstance(seq, TokenSequence):
        return np.asarray(seq.valid, dtype=np.int64)
    return np.asarray(seq, dtype=np.int64)


def greedy_decode(logits: np.ndarray, n: int) -> np.ndarray:
    """Argmax per position over gene tokens, skipping ones already emitted."""
    scores = np.array(logits[:n], dtype=np.float64, copy=True)
    scores[:, :N_SPECIAL] = -np.inf
    out = np.empty(n, dtype=np.int64)
    for j in range(n):
        t = int(np.argmax(scores[j]))
        out[j] = t
        scores[j + 1 :, t] = -np.inf
    return out


@torch.no_grad()
def reconstruct_batch(model: GeneMamba, sequences, batch_size: int = 32) -> list[np.ndarray]:
    model.eval()
    seqs = [_as_tokens(s) for s in sequences]
    out = []
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        tokens, mask = make_batch(chunk)
        logits = model.logits(model.hidden(tokens, mask)).numpy()
        for i, s in enumerate(chunk):
            out.append(greedy_decode(logits[i], len(s)))
    return out


def reconstruct(model: GeneMamba, sequence) -> np.ndarray:
    return reconstruct_batch(model, [sequence])[0]


def rank_scores(reference, candidate):
    """Aligned rank scores over the reference genes.

    A gene at position ``p`` of a length-``n`` list scores ``n - p``; reference
    genes missing from the candidate score 0.
    """
    ref = list(map(int, reference))
    cand_pos = {int(t): p for p, t in enumerate(candidate)}
    n = len(ref)
    a = np.array([n - p for p in range(n)], dtype=float)
    b = np.array([n - cand_pos[t] if t in cand_pos else 0.0 for t in ref], dtype=float)
    return a, b


def aligned_spearman(reference, candidate) -> float:
    if len(reference) < 2:
        return float("nan")
    a, b = rank_scores(reference, candidate)
    return seqm.spearman(a, b)


@dataclass
class CellReconstruction:
    cell_id: str
    input: np.ndarray
    output: np.ndarray
    em: int
    ld: int
    nld: float
    bleu: float
    spearman: float


@dataclass
class ReconstructionSummary:
    cells: list[CellReconstruction] = field(default_factory=list)

    def _mean(self, attr, skip_nan=False) -> float:
        vals = np.array([getattr(c, attr) for c in self.cells], dtype=float)
        if skip_nan:
            vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def metrics(self) -> dict[str, float]:
        n_undefined = sum(np.isnan(c.spearman) for c in self.cells)
        return {
            "em": self._mean("em"),
            "ld": self._mean("ld"),
            "nld": self._mean("nld"),
            "bleu": self._mean("bleu"),
            "spearman": self._mean("spearman", skip_nan=True),
            "n_cells": float(len(self.cells)),
            "n_spearman_undefined": float(n_undefined),
        }

    def venn_counts(self) -> dict[str, int]:
        only_in = both = only_out = 0
        for c in self.cells:
            a, b = set(c.input.tolist()), set(c.output.tolist())
            only_in += len(a - b)
            both += len(a & b)
            only_out += len(b - a)
        return {"input_only": only_in, "shared": both, "output_only": only_out}

    def rank_pairs(self) -> np.ndarray:
        """(input rank, output rank) for every gene present in both, 1-based."""
        rows = []
        for c in self.cells:
            pos = {int(t): p for p, t in enumerate(c.output)}
            for p, t in enumerate(c.input):
                if int(t) in pos:
                    rows.append((p + 1, pos[int(t)] + 1))
        return np.array(rows, dtype=np.int64).reshape(-1, 2)


def score_pair(cell_id, reference, candidate) -> CellReconstruction:
    ref, cand = _as_tokens(reference), _as_tokens(candidate)
    return CellReconstruction(
        cell_id=cell_id,
        input=ref,
        output=cand,
        em=seqm.exact_match(ref, cand),
        ld=seqm.levenshtein(ref, cand),
        nld=seqm.nld(ref, cand),
        bleu=seqm.bleu(cand, ref),
        spearman=aligned_spearman(ref, cand),
    )


def reconstruct_dataset(model: GeneMamba, dataset: TokenizedDataset, batch_size: int = 32) -> ReconstructionSummary:
    outputs = reconstruct_batch(model, dataset.sequences, batch_size)
    ids = dataset.cell_ids or [str(i) for i in range(len(dataset))]
    return ReconstructionSummary(
        [score_pair(cid, s, o) for cid, s, o in zip(ids, dataset.sequences, outputs)]
    )
