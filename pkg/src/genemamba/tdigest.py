"""Merging-buffer t-digest for streaming median estimation.

Values are appended to an unsorted buffer; the buffer is folded into the
centroid list when it fills up or when a quantile is requested.  While the
total weight stays at or below ``compression`` the digest keeps every
distinct value as its own centroid, so quantiles are exact in that regime.
Above it, centroids are merged greedily under the arcsine (k1) scale
function, which keeps the tails at single-point resolution.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from genemamba.errors import ConfigError, DataError, InputError, StateError

MIN_COMPRESSION = 20.0
DEFAULT_COMPRESSION = 100.0

_HEADER = struct.Struct("<dQ")


class TDigest:
    """Mergeable quantile sketch.

    Quantiles follow the linear-interpolation convention of
    ``numpy.quantile``: rank ``q * (n - 1)`` over the sorted sample.
    """

    def __init__(self, compression: float = DEFAULT_COMPRESSION):
        compression = float(compression)
        if not math.isfinite(compression) or compression < MIN_COMPRESSION:
            raise ConfigError(
                f"compression must be >= {MIN_COMPRESSION:g}, got {compression!r}"
            )
        self.compression = compression
        self._means = np.empty(0)
        self._weights = np.empty(0)
        self._buffer: list[np.ndarray] = []
        self._buffered = 0
        self._buffer_limit = int(5 * compression)
        self._min = math.inf
        self._max = -math.inf

    # -- state -----------------------------------------------------------

    @property
    def total_weight(self) -> float:
        return float(self._weights.sum()) + self._buffered

    @property
    def centroids(self) -> list[tuple[float, float]]:
        self._flush()
        return list(zip(self._means.tolist(), self._weights.tolist()))

    def __len__(self) -> int:
        self._flush()
        return len(self._means)

    def __repr__(self) -> str:
        return (
            f"TDigest(compression={self.compression:g}, "
            f"total_weight={self.total_weight:g})"
        )

    # -- updates ---------------------------------------------------------

    def update(self, value: float) -> "TDigest":
        """Insert one observation with unit weight."""
        return self.update_many([value])

    def update_many(self, values) -> "TDigest":
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size == 0:
            return self
        if not np.all(np.isfinite(arr)):
            raise InputError("t-digest accepts finite values only")
        self._min = min(self._min, float(arr.min()))
        self._max = max(self._max, float(arr.max()))
        self._buffer.append(arr)
        self._buffered += arr.size
        if self._buffered >= self._buffer_limit:
            self._flush()
        return self

    def merge(self, other: "TDigest") -> "TDigest":
        """Return a new digest summarising both inputs; neither is modified."""
        if other.compression != self.compression:
            raise ConfigError(
                f"cannot merge digests with compression {self.compression:g} "
                f"and {other.compression:g}"
            )
        out = TDigest(self.compression)
        means, weights = [], []
        for d in (self, other):
            d._flush()
            means.append(d._means)
            weights.append(d._weights)
        out._means = np.concatenate(means)
        out._weights = np.concatenate(weights)
        out._min = min(self._min, other._min)
        out._max = max(self._max, other._max)
        out._compress()
        return out

    def _flush(self) -> None:
        if not self._buffered:
            return
        pending = np.concatenate(self._buffer)
        self._buffer = []
        self._buffered = 0
        self._means = np.concatenate([self._means, pending])
        self._weights = np.concatenate([self._weights, np.ones(pending.size)])
        self._compress()

    def _compress(self) -> None:
        if self._means.size == 0:
            return
        order = np.argsort(self._means, kind="stable")
        means = self._means[order]
        weights = self._weights[order]
        means, weights = _collapse_equal(means, weights)
        total = weights.sum()
        if total > self.compression and means.size > 1:
            means, weights = self._k1_merge(means, weights, total)
        self._means, self._weights = means, weights

    def _k1_merge(self, means, weights, total):
        delta = self.compression

        def k(q):
            return delta / (2 * math.pi) * math.asin(2 * q - 1)

        def k_inv(kv):
            if kv >= delta / 4:
                return 1.0
            return (math.sin(2 * math.pi * kv / delta) + 1) / 2

        out_m, out_w = [], []
        cur_m, cur_w = float(means[0]), float(weights[0])
        done = 0.0
        limit = k_inv(k(0.0) + 1) * total
        for m, w in zip(means[1:].tolist(), weights[1:].tolist()):
            if done + cur_w + w <= limit:
                cur_m += (m - cur_m) * w / (cur_w + w)
                cur_w += w
            else:
                out_m.append(cur_m)
                out_w.append(cur_w)
                done += cur_w
                limit = k_inv(k(min(done / total, 1.0)) + 1) * total
                cur_m, cur_w = m, w
        out_m.append(cur_m)
        out_w.append(cur_w)
        return _collapse_equal(np.array(out_m), np.array(out_w))

    # -- queries ---------------------------------------------------------

    def quantile(self, q: float) -> float:
        q = float(q)
        if not 0.0 <= q <= 1.0:
            raise InputError(f"quantile must lie in [0, 1], got {q!r}")
        self._flush()
        if self._means.size == 0:
            raise StateError("quantile of an empty t-digest")
        total = self._weights.sum()
        rank = q * (total - 1)
        starts = np.cumsum(self._weights) - self._weights
        if total <= self.compression:
            # every centroid is a run of identical values
            xp = np.column_stack([starts, starts + self._weights - 1]).ravel()
            fp = np.repeat(self._means, 2)
        else:
            centers = starts + (self._weights - 1) / 2
            lo = min(self._min, float(self._means[0]))
            hi = max(self._max, float(self._means[-1]))
            xp = np.concatenate([[0.0], centers, [total - 1]])
            fp = np.concatenate([[lo], self._means, [hi]])
        return float(np.interp(rank, xp, fp))

    def median(self) -> float:
        return self.quantile(0.5)

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        """Little-endian record: compression, centroid count, (mean, weight) pairs."""
        self._flush()
        pairs = np.column_stack([self._means, self._weights]).astype("<f8")
        return _HEADER.pack(self.compression, len(self._means)) + pairs.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TDigest":
        if len(data) < _HEADER.size:
            raise DataError("truncated t-digest record")
        compression, n = _HEADER.unpack_from(data)
        body = data[_HEADER.size:]
        if len(body) != 16 * n:
            raise DataError(
                f"t-digest record declares {n} centroids but holds {len(body)} bytes"
            )
        out = cls(compression)
        pairs = np.frombuffer(body, dtype="<f8").reshape(n, 2)
        out._means = pairs[:, 0].astype(np.float64)
        out._weights = pairs[:, 1].astype(np.float64)
        if n:
            if np.any(np.diff(out._means) <= 0) or np.any(out._weights <= 0):
                raise DataError("t-digest record violates centroid ordering")
            # extremes are not stored; the outer centroids stand in for them
            out._min, out._max = float(out._means[0]), float(out._means[-1])
        return out


def _collapse_equal(means: np.ndarray, weights: np.ndarray):
    if means.size < 2:
        return means, weights
    new_run = np.concatenate([[True], np.diff(means) != 0])
    if new_run.all():
        return means, weights
    idx = np.cumsum(new_run) - 1
    return means[new_run], np.bincount(idx, weights=weights)


def td_create(compression: float = DEFAULT_COMPRESSION) -> TDigest:
    return TDigest(compression)


def td_insert(sketch: TDigest, value: float) -> TDigest:
    return sketch.update(value)


def td_merge(a: TDigest, b: TDigest) -> TDigest:
    return a.merge(b)


def td_quantile(sketch: TDigest, q: float) -> float:
    return sketch.quantile(q)
