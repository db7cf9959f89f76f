"""Training losses: next-gene NLL, pathway InfoNCE, and their weighted sum."""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from genemamba.corpus import N_SPECIAL, Vocabulary
from genemamba.errors import DataError, InputError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.1
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class LossConfig:
    gamma: float = DEFAULT_GAMMA
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError("temperature must be positive")
        if self.gamma < 0:
            raise InputError("pathway weight must be non-negative")


class PathwaySet:
    """Gene token -> pathway ids.  Two genes are positives iff they share one."""

    def __init__(self, membership: dict[int, set] | None = None):
        self.membership: dict[int, frozenset] = {}
        for gene, pws in (membership or {}).items():
            if pws:
                self.membership[int(gene)] = frozenset(pws)

    def __contains__(self, token: int) -> bool:
        return token in self.membership

    def __len__(self) -> int:
        return len(self.membership)

    def positive(self, a: int, b: int) -> bool:
        if a == b:
            return False
        pa, pb = self.membership.get(a), self.membership.get(b)
        return bool(pa and pb and pa & pb)

    def positive_matrix(self, tokens) -> torch.Tensor:
        tokens = [int(t) for t in tokens]
        index = {p: k for k, p in enumerate(sorted({p for s in self.membership.values() for p in s}))}
        incidence = torch.zeros(len(tokens), max(len(index), 1))
        for i, t in enumerate(tokens):
            for p in self.membership.get(t, ()):
                incidence[i, index[p]] = 1.0
        out = (incidence @ incidence.T) > 0
        out.fill_diagonal_(False)
        return out

    def pathways(self) -> dict:
        groups = defaultdict(list)
        for gene, pws in self.membership.items():
            for p in pws:
                groups[p].append(gene)
        return {p: sorted(g) for p, g in sorted(groups.items())}

    @classmethod
    def load(cls, path, vocab: Vocabulary, strict: bool = False) -> "PathwaySet":
        """Read ``gene_id<TAB>pathway_id`` lines; unknown genes are skipped."""
        member = defaultdict(set)
        skipped = 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'gene<TAB>pathway'")
                token = vocab.get(parts[0])
                if token is None:
                    if strict:
                        raise DataError(f"{path}:{lineno}: unknown gene {parts[0]!r}")
                    skipped += 1
                    continue
                member[token].add(parts[1])
        if skipped:
            logger.warning("skipped %d pathway lines for genes outside the vocabulary", skipped)
        return cls(member)

    def save(self, path, vocab: Vocabulary) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for gene in sorted(self.membership):
                for p in sorted(self.membership[gene]):
                    fh.write(f"{vocab.token_name(gene)}\t{p}\n")


def next_token_targets(tokens: torch.Tensor, mask: torch.Tensor):
    """Targets shifted left by one; the last valid position has none."""
    targets = torch.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    target_mask = torch.zeros_like(mask)
    target_mask[:, :-1] = mask[:, 1:] & mask[:, :-1]
    return targets, target_mask


def next_gene_nll(logits, targets, mask) -> torch.Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is set."""
    if not bool(mask.any()):
        raise InputError("no position has a next-token target")
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked[mask]).mean()


def pairwise_cosine(emb: torch.Tensor) -> torch.Tensor:
    norms = emb.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise InputError("cosine similarity of a zero vector")
    unit = emb / norms
    return unit @ unit.T


def infonce_pathway(emb: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """Contrastive loss averaged over ordered positive pairs.

    ``positives`` is a symmetric boolean (n, n) matrix.  Each anchor's
    denominator runs over every other row of ``emb``.  A batch without
    positive pairs contributes zero and emits a warning.
    """
    if not tau > 0:
        raise InputError("temperature must be positive")
    pos = positives.clone()
    pos.fill_diagonal_(False)
    if not bool(pos.any()):
        warnings.warn("pathway batch has no positive pairs; loss set to 0", RuntimeWarning)
        return emb.sum() * 0.0
    sim = pairwise_cosine(emb) / tau
    n = emb.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    logp = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    return -logp[pos].mean()


def total_loss(l_lang, l_pathway, cfg: LossConfig):
    return l_lang + cfg.gamma * l_pathway


def pooled_gene_embeddings(hidden, tokens, mask, genes=None):
    """Mean hidden state per distinct gene token in the batch.

    Returns (gene tokens, (g, d) embeddings).  ``genes`` restricts the set.
    """
    valid = mask & (tokens >= N_SPECIAL)
    flat_tok = tokens[valid]
    flat_h = hidden[valid]
    uniq, inverse = torch.unique(flat_tok, sorted=True, return_inverse=True)
    sums = hidden.new_zeros(len(uniq), hidden.shape[-1]).index_add(0, inverse, flat_h)
    counts = torch.bincount(inverse, minlength=len(uniq)).to(hidden.dtype)
    emb = sums / counts.unsqueeze(-1)
    if genes is not None:
        keep = torch.tensor([int(t) in genes for t in uniq.tolist()], dtype=torch.bool)
        uniq, emb = uniq[keep], emb[keep]
    return uniq, emb


@dataclass
class LossBreakdown:
    total: torch.Tensor
    lang: torch.Tensor
    pathway: torch.Tensor


def batch_loss(model, tokens, mask, pathways: PathwaySet | None, cfg: LossConfig) -> LossBreakdown:
    """Total loss for one batch: NLL on logits plus pooled-gene InfoNCE."""
    hidden = model.hidden(tokens, mask)
    targets, tmask = next_token_targets(tokens, mask)
    l_lang = next_gene_nll(model.logits(hidden), targets, tmask)
    l_path = hidden.new_zeros(())
    if pathways is not None and len(pathways):
        genes, emb = pooled_gene_embeddings(hidden, tokens, mask, pathways)
        pos = pathways.positive_matrix(genes.tolist())
        if genes.numel() >= 2 and bool(pos.any()):
            l_path = infonce_pathway(emb, pos, cfg.tau)
    return LossBreakdown(total_loss(l_lang, l_path, cfg), l_lang, l_path)


def gradients(model, tokens, mask, pathways, cfg: LossConfig) -> dict[str, torch.Tensor]:
    """Gradient of the total loss for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, tokens, mask, pathways, cfg).total
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    loss.backward()
    out = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name}")
        out[name] = g
    model.zero_grad(set_to_none=True)
    return out
