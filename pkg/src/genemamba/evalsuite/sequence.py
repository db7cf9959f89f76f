"""Sequence-similarity metrics for rank reconstruction."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np
from scipy.stats import spearmanr


def exact_match(a, b) -> int:
    return int(list(a) == list(b))


def em_avg(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return sum(exact_match(a, b) for a, b in pairs) / len(pairs)


def levenshtein(a, b) -> int:
    """Edit distance (insert/delete/substitute, unit cost) over token lists."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def nld(a, b) -> float:
    """1 - LD / max(len); two empty sequences score 1."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Unsmoothed BLEU with uniform weights and the standard brevity penalty.

    Any zero n-gram precision (including a candidate shorter than ``n``)
    makes the score 0.
    """
    cand, ref = list(candidate), list(reference)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        c_grams = _ngrams(cand, n)
        total = sum(c_grams.values())
        if total == 0:
            return 0.0
        r_grams = _ngrams(ref, n)
        clipped = sum(min(c, r_grams[g]) for g, c in c_grams.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / max_n
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return math.exp(log_p) * bp


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("spearman needs two equal-length sequences of size >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(spearmanr(a, b).statistic)
