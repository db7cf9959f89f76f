"""Expression matrices, preprocessing, and rank tokenization.

Pipeline order used by :func:`preprocess`::

    filter_cells -> depth_normalize_log1p -> compute_gene_medians
                 -> normalize_by_median -> rank_tokenize (per cell)

Gene medians are taken over the non-zero entries of the log-normalized
matrix.  File formats:

* matrix text file -- ``cells <n> genes <m>``, ``m`` gene id lines, then
  ``cell gene count`` triplets (zero-based indices);
* label table -- tab-separated with a header whose first column is ``cell``;
* tokenized dataset -- see :class:`TokenizedDataset`.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from genemamba.errors import DataError, InputError
from genemamba.tdigest import DEFAULT_COMPRESSION, TDigest

logger = logging.getLogger(__name__)

PAD = 0
CLS = 1
N_SPECIAL = 2
SPECIAL_NAMES = ("<pad>", "<cls>")

DEFAULT_MIN_GENES = 200
DEFAULT_TARGET_DEPTH = 1e4
DEFAULT_MAX_LEN = 2048


@dataclass
class ExpressionMatrix:
    """Sparse cells x genes counts; zeros are implicit."""

    counts: sp.csr_matrix
    gene_ids: list[str]
    cell_ids: list[str] = None
    cell_meta: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = sp.csr_matrix(self.counts, dtype=np.float64)
        self.counts.eliminate_zeros()
        self.counts.sort_indices()
        if self.cell_ids is None:
            self.cell_ids = [str(i) for i in range(self.n_cells)]
        if self.counts.shape[1] != len(self.gene_ids):
            raise DataError("gene id count does not match matrix width")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise DataError("gene ids must be unique")
        if len(self.cell_ids) != self.n_cells:
            raise DataError("cell id count does not match matrix height")
        for name, col in self.cell_meta.items():
            if len(col) != self.n_cells:
                raise DataError(f"label column {name!r} has {len(col)} rows")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    def subset_cells(self, keep) -> "ExpressionMatrix":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return ExpressionMatrix(
            self.counts[keep],
            list(self.gene_ids),
            [self.cell_ids[i] for i in keep],
            {k: [v[i] for i in keep] for k, v in self.cell_meta.items()},
        )

    def with_counts(self, counts) -> "ExpressionMatrix":
        return ExpressionMatrix(
            counts, list(self.gene_ids), list(self.cell_ids), dict(self.cell_meta)
        )


# -- matrix files ---------------------------------------------------------


def load_matrix(path, labels_path=None) -> ExpressionMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty matrix file")
    head = lines[0].split()
    try:
        if len(head) != 4 or head[0] != "cells" or head[2] != "genes":
            raise ValueError
        n_cells, n_genes = int(head[1]), int(head[3])
    except ValueError:
        raise DataError(f"{path}:1: expected 'cells <n> genes <m>' header") from None
    if n_cells < 0 or n_genes < 0 or len(lines) < 1 + n_genes:
        raise DataError(f"{path}: header declares {n_genes} genes, file too short")
    gene_ids = [g.strip() for g in lines[1 : 1 + n_genes]]
    if any(not g for g in gene_ids):
        raise DataError(f"{path}: blank gene id")
    if len(set(gene_ids)) != n_genes:
        raise DataError(f"{path}: duplicate gene id")

    rows, cols, vals = [], [], []
    seen = set()
    for lineno, line in enumerate(lines[1 + n_genes :], start=2 + n_genes):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed triplet {line!r}") from None
        if not (0 <= i < n_cells and 0 <= j < n_genes):
            raise DataError(f"{path}:{lineno}: index ({i}, {j}) out of bounds")
        if not np.isfinite(v) or v < 0:
            raise DataError(f"{path}:{lineno}: count must be finite and >= 0")
        if (i, j) in seen:
            raise DataError(f"{path}:{lineno}: duplicate entry ({i}, {j})")
        seen.add((i, j))
        if v > 0:
            rows.append(i)
            cols.append(j)
            vals.append(v)
    counts = sp.csr_matrix((vals, (rows, cols)), shape=(n_cells, n_genes))
    meta = load_labels(labels_path, n_cells) if labels_path else {}
    return ExpressionMatrix(counts, gene_ids, cell_meta=meta)


def save_matrix(m: ExpressionMatrix, path) -> None:
    coo = m.counts.tocoo()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"cells {m.n_cells} genes {m.n_genes}\n")
        for g in m.gene_ids:
            fh.write(f"{g}\n")
        for i, j, v in zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()):
            fh.write(f"{i} {j} {v!r}\n")


def load_labels(path, n_cells: int) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty label table")
    header = lines[0].split("\t")
    if header[0] != "cell":
        raise DataError(f"{path}:1: first column must be 'cell'")
    cols = {name: [""] * n_cells for name in header[1:]}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            i = int(parts[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad cell index") from None
        if not 0 <= i < n_cells:
            raise DataError(f"{path}:{lineno}: cell index {i} out of bounds")
        for name, value in zip(header[1:], parts[1:]):
            cols[name][i] = value
    return cols


def save_labels(meta: dict[str, list[str]], path) -> None:
    names = list(meta)
    n = len(meta[names[0]]) if names else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["cell", *names]) + "\n")
        for i in range(n):
            fh.write("\t".join([str(i), *(meta[k][i] for k in names)]) + "\n")


# -- preprocessing --------------------------------------------------------


def filter_cells(m: ExpressionMatrix, min_genes: int = DEFAULT_MIN_GENES) -> ExpressionMatrix:
    if min_genes < 1:
        raise InputError("min_genes must be >= 1")
    expressed = np.diff(m.counts.indptr)
    return m.subset_cells(expressed >= min_genes)


def depth_normalize_log1p(
    m: ExpressionMatrix, target: float = DEFAULT_TARGET_DEPTH
) -> ExpressionMatrix:
    """Scale each cell to ``target`` total counts, then apply log1p."""
    if not target > 0:
        raise InputError("target depth must be positive")
    totals = np.asarray(m.counts.sum(axis=1)).ravel()
    if np.any(totals <= 0):
        bad = int(np.flatnonzero(totals <= 0)[0])
        raise InputError(f"cell {m.cell_ids[bad]} has zero total count; filter first")
    out = m.counts.copy()
    scale = target / totals
    out.data = np.log1p(out.data * np.repeat(scale, np.diff(out.indptr)))
    return m.with_counts(out)


@dataclass
class NormalizationFactors:
    """Per-gene non-zero medians; NaN marks genes never observed non-zero."""

    gene_ids: list[str]
    medians: np.ndarray

    def __post_init__(self):
        self.medians = np.asarray(self.medians, dtype=np.float64)
        present = ~np.isnan(self.medians)
        if np.any(self.medians[present] <= 0):
            raise DataError("normalization factors must be positive")

    def present(self, gene_id: str) -> bool:
        return not np.isnan(self.lookup([gene_id])[0])

    def lookup(self, gene_ids) -> np.ndarray:
        index = {g: i for i, g in enumerate(self.gene_ids)}
        return np.array(
            [self.medians[index[g]] if g in index else np.nan for g in gene_ids]
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for g, v in zip(self.gene_ids, self.medians.tolist()):
                fh.write(f"{g}\t{'absent' if np.isnan(v) else repr(v)}\n")

    @classmethod
    def load(cls, path) -> "NormalizationFactors":
        genes, vals = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'gene<TAB>median'")
                genes.append(parts[0])
                try:
                    vals.append(np.nan if parts[1] == "absent" else float(parts[1]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad median value") from None
        return cls(genes, np.array(vals))


def _shard_digests(csc: sp.csc_matrix, compression: float) -> list[TDigest | None]:
    out = []
    for j in range(csc.shape[1]):
        col = csc.data[csc.indptr[j] : csc.indptr[j + 1]]
        col = col[col > 0]
        out.append(TDigest(compression).update_many(col) if col.size else None)
    return out


def compute_gene_medians(
    m: ExpressionMatrix,
    compression: float = DEFAULT_COMPRESSION,
    n_shards: int = 1,
    workers: int = 1,
) -> NormalizationFactors:
    """Non-zero median per gene via t-digest.

    Cells are split into ``n_shards`` contiguous blocks whose digests are
    merged; the result depends on ``n_shards`` but never on ``workers``.
    """
    if m.n_cells == 0:
        raise InputError("cannot compute medians of an empty matrix")
    TDigest(compression)  # validates before any work is scheduled
    bounds = np.linspace(0, m.n_cells, max(1, n_shards) + 1).astype(int)
    blocks = [m.counts[a:b].tocsc() for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        shards = list(pool.map(lambda c: _shard_digests(c, compression), blocks))
    medians = np.full(m.n_genes, np.nan)
    for j in range(m.n_genes):
        digest = None
        for shard in shards:
            d = shard[j]
            if d is not None:
                digest = d if digest is None else digest.merge(d)
        if digest is not None:
            medians[j] = digest.median()
    return NormalizationFactors(list(m.gene_ids), medians)


def normalize_by_median(m: ExpressionMatrix, f: NormalizationFactors) -> ExpressionMatrix:
    """Divide each entry by its cell total, then by the gene's median factor."""
    factors = f.lookup(m.gene_ids)
    used = np.unique(m.counts.indices)
    missing = used[np.isnan(factors[used])]
    if missing.size:
        raise DataError(f"no normalization factor for expressed gene {m.gene_ids[missing[0]]!r}")
    totals = np.asarray(m.counts.sum(axis=1)).ravel()
    if np.any(totals[np.diff(m.counts.indptr) > 0] <= 0):
        raise InputError("cell with non-positive total")
    out = m.counts.copy()
    row_total = np.repeat(totals, np.diff(out.indptr))
    # dividing by the shared cell total last keeps exact ties tied and
    # makes the within-cell order independent of how the total rounds
    out.data = (out.data / factors[out.indices]) / row_total
    return m.with_counts(out)


# -- vocabulary & tokens ----------------------------------------------------


class Vocabulary:
    """Token ids: PAD=0, CLS=1, then genes in insertion order."""

    def __init__(self, gene_ids):
        gene_ids = list(gene_ids)
        if len(set(gene_ids)) != len(gene_ids):
            raise InputError("duplicate gene id in vocabulary")
        clash = set(gene_ids) & set(SPECIAL_NAMES)
        if clash:
            raise InputError(f"gene id collides with special token {clash.pop()!r}")
        self.gene_ids = gene_ids
        self._index = {g: i + N_SPECIAL for i, g in enumerate(gene_ids)}

    def __len__(self) -> int:
        return len(self.gene_ids) + N_SPECIAL

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.gene_ids == other.gene_ids

    def get(self, gene_id: str):
        return self._index.get(gene_id)

    def __getitem__(self, gene_id: str) -> int:
        return self._index[gene_id]

    def token_name(self, token: int) -> str:
        if token < N_SPECIAL:
            return SPECIAL_NAMES[token]
        return self.gene_ids[token - N_SPECIAL]

    def to_text(self) -> str:
        names = [*SPECIAL_NAMES, *self.gene_ids]
        return "".join(f"{i}\t{n}\n" for i, n in enumerate(names))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        names = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] != str(lineno - 1):
                raise DataError(f"vocabulary line {lineno}: expected '<id>\\t<name>'")
            names.append(parts[1])
        if tuple(names[:N_SPECIAL]) != SPECIAL_NAMES:
            raise DataError("vocabulary must start with the special tokens")
        return cls(names[N_SPECIAL:])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> int:
        """64-bit fingerprint stored in tokenized dataset headers."""
        h = hashlib.sha256(self.to_text().encode("utf-8")).digest()
        return int.from_bytes(h[:8], "little")


def build_vocab(gene_ids) -> Vocabulary:
    return Vocabulary(gene_ids)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    valid_len: int

    @property
    def valid(self) -> np.ndarray:
        return self.tokens[: self.valid_len]


# Low mantissa bits ignored when ranking.  Genes tied in exact arithmetic can
# land an ulp or two apart (e.g. after one cell's counts are rescaled, the
# shared gene medians move slightly), and a strict float compare would then
# let that noise decide their order instead of the token id.
RANK_DROP_BITS = 20


def rank_key(values) -> np.ndarray:
    """Sort key for positive values, truncated to a relative grid of ~2**-32."""
    bits = np.ascontiguousarray(values, dtype=np.float64).view(np.int64)
    return bits & ~np.int64((1 << RANK_DROP_BITS) - 1)


def rank_tokenize(gene_ids, values, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Order expressed genes by descending value; ties go to the lower token id.

    Values closer than about one part in 4e9 count as tied (see rank_key).
    """
    if max_len < 1:
        raise InputError("max_len must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    tokens = np.empty(len(values), dtype=np.int64)
    for k, g in enumerate(gene_ids):
        t = vocab.get(g)
        if t is None:
            raise DataError(f"gene {g!r} is not in the vocabulary")
        tokens[k] = t
    keep = values != 0
    tokens, values = tokens[keep], values[keep]
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise InputError("rank values must be finite and non-negative")
    order = np.lexsort((tokens, -rank_key(values)))[:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: order.size] = tokens[order]
    return TokenSequence(out, int(order.size))


# -- tokenized dataset file ------------------------------------------------

_DS_MAGIC = b"GMTK"
_DS_HEADER = struct.Struct("<4sIQII")  # magic, version, vocab hash, max_len, n_cells
_DS_VERSION = 1


@dataclass
class TokenizedDataset:
    """Rank-ordered gene tokens per cell (no CLS; models prepend it).

    Binary layout, little-endian: header (magic, version, vocab hash, max_len,
    n_cells); per cell a uint32 valid length followed by that many uint32
    token ids; then a uint32 byte count and a UTF-8 label table (TSV with a
    ``cell_id`` column first), empty when there are no labels.
    """

    sequences: list[np.ndarray]
    max_len: int
    vocab_hash: int
    cell_ids: list[str] = None
    labels: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        if self.cell_ids is None:
            self.cell_ids = [str(i) for i in range(len(self.sequences))]

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx) -> "TokenizedDataset":
        idx = list(idx)
        return TokenizedDataset(
            [self.sequences[i] for i in idx],
            self.max_len,
            self.vocab_hash,
            [self.cell_ids[i] for i in idx],
            {k: [v[i] for i in idx] for k, v in self.labels.items()},
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_DS_HEADER.pack(_DS_MAGIC, _DS_VERSION, self.vocab_hash, self.max_len, len(self)))
        for s in self.sequences:
            buf.write(struct.pack("<I", len(s)))
            buf.write(s.astype("<u4").tobytes())
        names = list(self.labels)
        table = io.StringIO()
        table.write("\t".join(["cell_id", *names]) + "\n")
        for i, cid in enumerate(self.cell_ids):
            table.write("\t".join([cid, *(self.labels[k][i] for k in names)]) + "\n")
        raw = table.getvalue().encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TokenizedDataset":
        try:
            magic, version, vhash, max_len, n = _DS_HEADER.unpack_from(data)
            if magic != _DS_MAGIC:
                raise DataError("not a tokenized dataset file")
            if version != _DS_VERSION:
                raise DataError(f"unsupported dataset version {version}")
            off = _DS_HEADER.size
            seqs = []
            for _ in range(n):
                (k,) = struct.unpack_from("<I", data, off)
                off += 4
                if k > max_len:
                    raise DataError("sequence longer than max_len")
                seqs.append(np.frombuffer(data, "<u4", k, off).astype(np.int64))
                off += 4 * k
            (nbytes,) = struct.unpack_from("<I", data, off)
            off += 4
            raw = data[off : off + nbytes]
            if len(raw) != nbytes or off + nbytes != len(data):
                raise DataError("dataset label table length mismatch")
        except (struct.error, ValueError) as exc:
            raise DataError(f"truncated dataset file: {exc}") from None
        rows = raw.decode("utf-8").splitlines()
        names = rows[0].split("\t")[1:] if rows else []
        cell_ids, labels = [], {k: [] for k in names}
        for row in rows[1:]:
            parts = row.split("\t")
            cell_ids.append(parts[0])
            for k, v in zip(names, parts[1:]):
                labels[k].append(v)
        if len(cell_ids) != n:
            raise DataError("dataset label table row count mismatch")
        return cls(seqs, max_len, vhash, cell_ids, labels)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TokenizedDataset":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from None
        return cls.from_bytes(data)


def tokenize_matrix(m_norm: ExpressionMatrix, vocab: Vocabulary, max_len: int) -> TokenizedDataset:
    seqs = []
    csr = m_norm.counts
    genes = np.asarray(m_norm.gene_ids, dtype=object)
    for i in range(m_norm.n_cells):
        lo, hi = csr.indptr[i], csr.indptr[i + 1]
        seq = rank_tokenize(genes[csr.indices[lo:hi]], csr.data[lo:hi], vocab, max_len)
        seqs.append(seq.valid.copy())
    return TokenizedDataset(seqs, max_len, vocab.digest(), list(m_norm.cell_ids), dict(m_norm.cell_meta))


@dataclass
class PreprocessResult:
    dataset: TokenizedDataset
    vocab: Vocabulary
    factors: NormalizationFactors
    n_input_cells: int


def preprocess(
    m: ExpressionMatrix,
    min_genes: int = DEFAULT_MIN_GENES,
    target_depth: float = DEFAULT_TARGET_DEPTH,
    max_len: int = DEFAULT_MAX_LEN,
    compression: float = DEFAULT_COMPRESSION,
    vocab: Vocabulary | None = None,
    factors: NormalizationFactors | None = None,
    workers: int = 1,
) -> PreprocessResult:
    """Run the full matrix -> token pipeline.

    Passing ``vocab``/``factors`` from an earlier corpus reuses them, so new
    datasets are tokenized consistently with the pretraining corpus.
    """
    kept = filter_cells(m, min_genes)
    logger.info("kept %d of %d cells (min_genes=%d)", kept.n_cells, m.n_cells, min_genes)
    if kept.n_cells == 0:
        raise DataError(f"no cell expresses at least {min_genes} genes")
    logged = depth_normalize_log1p(kept, target_depth)
    if factors is None:
        factors = compute_gene_medians(logged, compression, workers=workers)
    if vocab is None:
        vocab = build_vocab(m.gene_ids)
    normed = normalize_by_median(logged, factors)
    dataset = tokenize_matrix(normed, vocab, max_len)
    return PreprocessResult(dataset, vocab, factors, m.n_cells)
