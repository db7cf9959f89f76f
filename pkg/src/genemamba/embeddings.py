"""Embedding matrices on disk and the cell/gene embedding passes that fill them.

File layout, little-endian: uint32 rows ``n``, uint32 width ``d``; ``n``
ids as uint32 byte length plus UTF-8 bytes; then ``n * d`` float32 values
in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from genemamba.bimamba import GeneMamba, cell_embedding, make_batch
from genemamba.corpus import N_SPECIAL, TokenizedDataset
from genemamba.errors import DataError, InputError


@dataclass
class EmbeddingTable:
    ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise InputError("embedding ids and rows differ in count")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: self.values[i].astype(np.float64) for i, k in enumerate(self.ids)}

    def to_bytes(self) -> bytes:
        n, d = self.values.shape
        parts = [struct.pack("<II", n, d)]
        for k in self.ids:
            raw = k.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        parts.append(self.values.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingTable":
        try:
            n, d = struct.unpack_from("<II", data)
            off = 8
            ids = []
            for _ in range(n):
                (k,) = struct.unpack_from("<I", data, off)
                off += 4
                raw = data[off : off + k]
                if len(raw) != k:
                    raise DataError("truncated embedding id table")
                ids.append(raw.decode("utf-8"))
                off += k
            if len(data) - off != 4 * n * d:
                raise DataError("embedding payload size mismatch")
            values = np.frombuffer(data, "<f4", n * d, off).reshape(n, d)
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise DataError(f"malformed embedding file: {exc}") from None
        return cls(ids, values.copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read embeddings {path}: {exc}") from None


@torch.no_grad()
def embed_cells(model: GeneMamba, dataset: TokenizedDataset, mode: str = "cls",
                batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for a in range(0, len(dataset), batch_size):
        tokens, mask = make_batch(dataset.sequences[a : a + batch_size])
        out.append(cell_embedding(model, tokens, mask, mode).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.d_model))


@torch.no_grad()
def embed_genes(model: GeneMamba, dataset: TokenizedDataset, batch_size: int = 32):
    """Mean hidden state of each gene token over all its occurrences.

    Returns (sorted gene tokens, (g, d) array).
    """
    model.eval()
    v, d = model.config.vocab_size, model.config.d_model
    sums = torch.zeros(v, d, dtype=torch.float64)
    counts = torch.zeros(v, dtype=torch.float64)
    for a in range(0, len(dataset), batch_size):
        tokens, mask = make_batch(dataset.sequences[a : a + batch_size])
        hidden = model.hidden(tokens, mask)
        valid = mask & (tokens >= N_SPECIAL)
        sums.index_add_(0, tokens[valid], hidden[valid])
        counts.index_add_(0, tokens[valid], torch.ones(int(valid.sum()), dtype=torch.float64))
    seen = torch.nonzero(counts > 0).squeeze(-1)
    return seen.numpy(), (sums[seen] / counts[seen].unsqueeze(-1)).numpy()
