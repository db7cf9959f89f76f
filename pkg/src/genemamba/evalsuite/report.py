"""Metric reports: line-delimited text, JSON, and delimited plotting data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from genemamba.errors import NumericError

# closed ranges; metrics not listed are unbounded
RANGES = {
    "ari": (-1.0, 1.0),
    "nmi": (0.0, 1.0),
    "asw_cell": (0.0, 1.0),
    "asw_batch": (0.0, 1.0),
    "graph_conn": (0.0, 1.0),
    "avg_bio": (-1.0 / 3, 1.0),
    "avg_batch": (0.0, 1.0),
    "em": (0.0, 1.0),
    "ld": (0.0, math.inf),
    "nld": (0.0, 1.0),
    "bleu": (0.0, 1.0),
    "spearman": (-1.0, 1.0),
    "js": (0.0, math.log(2)),
    "kl": (0.0, math.inf),
    "euclidean": (0.0, math.sqrt(2)),
}


def _range_key(name: str) -> str | None:
    if name in RANGES:
        return name
    for key in RANGES:
        if name.endswith("_" + key) or name.startswith(key + "_"):
            return key
    return None


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class MetricReport:
    metrics: dict[str, float]
    dataset_id: str = ""
    model_id: str = ""
    params: dict = field(default_factory=dict)

    def validate(self, tol: float = 1e-12) -> None:
        for name, v in self.metrics.items():
            if math.isnan(v):
                continue
            key = _range_key(name)
            if key is None:
                continue
            lo, hi = RANGES[key]
            if not lo - tol <= v <= hi + tol:
                raise NumericError(f"metric {name}={v} outside [{lo}, {hi}]")

    def to_lines(self) -> str:
        out = []
        for name in self.metrics:
            out.append(f"metric={name} value={_fmt(self.metrics[name])}")
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_id,
            "model": self.model_id,
            "params": self.params,
            "metrics": {k: (None if math.isnan(v) else float(v)) for k, v in self.metrics.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        metrics = {k: (float("nan") if v is None else float(v)) for k, v in d["metrics"].items()}
        return cls(metrics, d.get("dataset", ""), d.get("model", ""), d.get("params", {}))


def parse_lines(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if not line.startswith("metric="):
            continue
        name_part, value_part = line.split(" ", 1)
        out[name_part[len("metric="):]] = float(value_part[len("value="):])
    return out


def write_table(path, header, rows) -> None:
    """Tab-delimited table; floats written with repr for round-tripping."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(x) if isinstance(x, (float, np.floating)) else str(x) for x in row) + "\n")

