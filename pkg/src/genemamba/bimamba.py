"""Bidirectional Mamba blocks and the stacked token model.

Each block runs one shared Mamba mixer over the sequence and over its
padding-aware reversal, re-aligns the reversed outputs, and fuses the two
with a per-channel sigmoid gate.  Blocks are pre-normalized residual units
with PAD positions zeroed on output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from genemamba.corpus import CLS, PAD
from genemamba.errors import ConfigError, InputError, NumericError
from genemamba.ssm import SelectiveSSM, selective_scan


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    max_len: int = 2048
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        for name in ("vocab_size", "d_model", "d_state", "expand", "d_conv", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size <= CLS:
            raise ConfigError("vocab_size must include the special tokens")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def check_prefix_mask(mask: torch.Tensor) -> None:
    m = mask.to(torch.int8)
    if (m[..., 1:] > m[..., :-1]).any():
        raise InputError("pad mask must mark a valid prefix in every row")


def reverse_valid(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Reverse each row's valid prefix along dim 1; PAD positions stay put.

    ``x`` is (b, l) or (b, l, ...); ``mask`` is (b, l) with True on valid
    positions.  The operation is an involution.
    """
    check_prefix_mask(mask)
    length = mask.shape[1]
    n_valid = mask.sum(dim=1, keepdim=True)
    pos = torch.arange(length, device=mask.device).unsqueeze(0)
    idx = torch.where(pos < n_valid, n_valid - 1 - pos, pos)
    if x.dim() > 2:
        idx = idx.view(*idx.shape, *([1] * (x.dim() - 2))).expand_as(x)
    return torch.gather(x, 1, idx)


def causal_depthwise_conv(u, weight, bias):
    """Per-channel causal convolution of u (b, l, c) with weight (c, 1, k)."""
    k = weight.shape[-1]
    length = u.shape[1]
    padded = F.pad(u, (0, 0, k - 1, 0))
    out = bias
    for j in range(k):
        out = out + padded[:, j : j + length] * weight[:, 0, j]
    return out


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class MambaMixer(nn.Module):
    """in_proj -> causal depthwise conv -> SiLU -> selective scan, SiLU-gated."""

    def __init__(self, d_model: int, d_inner: int, d_state: int, d_conv: int):
        super().__init__()
        self.d_inner = d_inner
        self.d_conv = d_conv
        self.in_proj = nn.Linear(d_model, 2 * d_inner)
        self.conv = nn.Conv1d(d_inner, d_inner, d_conv, groups=d_inner, padding=d_conv - 1)
        self.ssm = SelectiveSSM(d_inner, d_state)
        self.out_proj = nn.Linear(d_inner, d_model)

    def forward(self, x, mask):
        u, res = self.in_proj(x).chunk(2, dim=-1)
        u = u * mask.unsqueeze(-1)
        u = F.silu(causal_depthwise_conv(u, self.conv.weight, self.conv.bias))
        y, _ = selective_scan(self.ssm, u)
        return self.out_proj(y * F.silu(res))


class BiMambaBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = RMSNorm(cfg.d_model)
        self.mixer = MambaMixer(cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv)
        self.gate = nn.Linear(2 * cfg.d_model, cfg.d_model)

    def branches(self, hidden, mask):
        """Forward states, re-aligned backward states, and the gate."""
        x = self.norm(hidden)
        both = self.mixer(torch.cat([x, reverse_valid(x, mask)]), torch.cat([mask, mask]))
        fwd, bwd = both.chunk(2)
        bwd = reverse_valid(bwd, mask)
        z = torch.sigmoid(self.gate(torch.cat([fwd, bwd], dim=-1)))
        return fwd, bwd, z

    def forward(self, hidden, mask):
        fwd, bwd, z = self.branches(hidden, mask)
        fused = z * fwd + (1 - z) * bwd
        return (hidden + fused) * mask.unsqueeze(-1)


class GeneMamba(nn.Module):
    """Token embedding, stacked Bi-Mamba blocks, final norm, vocabulary head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        with torch.no_grad():
            self.embedding.weight.mul_(0.5)
        self.blocks = nn.ModuleList(BiMambaBlock(cfg) for _ in range(cfg.n_layers))
        self.norm_f = RMSNorm(cfg.d_model)
        if cfg.tie_embeddings:
            self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        else:
            self.head = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, tokens, mask=None):
        return self.hidden(tokens, mask)

    def hidden(self, tokens, mask=None):
        if mask is None:
            mask = tokens != PAD
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InputError("token id outside the vocabulary")
        check_prefix_mask(mask)
        h = self.embedding(tokens) * mask.unsqueeze(-1)
        for i, block in enumerate(self.blocks):
            try:
                h = block(h, mask)
            except NumericError as exc:
                raise NumericError(f"layer {i}: {exc}") from None
        return self.norm_f(h) * mask.unsqueeze(-1)

    def logits(self, hidden):
        if self.config.tie_embeddings:
            return hidden @ self.embedding.weight.T + self.head_bias
        return self.head(hidden)


def build_model(cfg: ModelConfig, seed: int = 0) -> GeneMamba:
    """Deterministically initialized float64 model."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = GeneMamba(cfg).double()
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def make_batch(sequences, prepend_cls: bool = True, length: int | None = None):
    """Pad token sequences into (tokens, mask) tensors."""
    rows = [list(map(int, s)) for s in sequences]
    if prepend_cls:
        rows = [[CLS, *r] for r in rows]
    width = max((len(r) for r in rows), default=0) if length is None else length
    if any(len(r) > width for r in rows):
        raise InputError("sequence longer than requested batch length")
    tokens = torch.full((len(rows), max(width, 1)), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    mask = torch.zeros_like(tokens, dtype=torch.bool)
    for i, r in enumerate(rows):
        mask[i, : len(r)] = True
    return tokens, mask


def cell_embedding(model: GeneMamba, tokens, mask, mode: str = "cls", hidden=None):
    """Per-cell vector: the CLS position's hidden state, or the masked mean."""
    if hidden is None:
        hidden = model.hidden(tokens, mask)
    if mode == "cls":
        if not bool((tokens[:, 0] == CLS).all()):
            raise InputError("cls embedding requires CLS at position 0")
        return hidden[:, 0]
    if mode == "mean":
        w = mask.to(hidden.dtype).unsqueeze(-1)
        return (hidden * w).sum(1) / w.sum(1).clamp(min=1)
    raise InputError(f"unknown embedding mode {mode!r}")
