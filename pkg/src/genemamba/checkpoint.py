"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"GMCK" | u32 version | u32 meta length | meta (UTF-8 JSON, sorted keys)
    u32 tensor count
    per tensor: u16 name length | name | u8 ndim | u64 dims... | f64 data

All tensors are stored as float64, so a model saved and reloaded is
bit-identical, and saving the same state twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from genemamba.errors import ConfigError, DataError

MAGIC = b"GMCK"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float64).numpy()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    try:
        if data[:4] != MAGIC:
            raise DataError("not a checkpoint file")
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise DataError(f"checkpoint version {version} unsupported (expected {VERSION})")
        off = 12
        meta_raw = data[off : off + meta_len]
        if len(meta_raw) != meta_len:
            raise DataError("truncated checkpoint metadata")
        meta = json.loads(meta_raw.decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 8 * size > len(data):
                raise DataError(f"truncated checkpoint tensor {name!r}")
            arr = np.frombuffer(data, "<f8", size, off).reshape(shape)
            off += 8 * size
            tensors[name] = torch.from_numpy(arr.astype(np.float64))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from None
    if off != len(data):
        raise DataError("trailing bytes after checkpoint tensors")
    return Checkpoint(meta, tensors)


def write(ckpt: Checkpoint, path) -> None:
    """Write atomically so an interrupted save never clobbers the last good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def read(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data)


def model_checkpoint(model, **meta) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    return Checkpoint({"model": model.config.to_dict(), **meta}, tensors)


def restore_model(ckpt: Checkpoint, expected_config=None):
    """Rebuild a model from a checkpoint, optionally enforcing its config."""
    from genemamba.bimamba import GeneMamba, ModelConfig

    if "model" not in ckpt.meta:
        raise DataError("checkpoint has no model section")
    cfg = ModelConfig(**ckpt.meta["model"])
    if expected_config is not None and cfg != expected_config:
        diff = [
            k for k, v in expected_config.to_dict().items() if cfg.to_dict().get(k) != v
        ]
        raise ConfigError(f"checkpoint config differs in {', '.join(diff)}")
    model = GeneMamba(cfg).double()
    state = ckpt.subset("model.")
    own = model.state_dict()
    if set(state) != set(own):
        raise DataError("checkpoint tensors do not match the model layout")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise DataError(f"shape mismatch for {k}")
    model.load_state_dict(state)
    return model


def save_model(model, path, **meta) -> None:
    write(model_checkpoint(model, **meta), path)


def load_model(path, expected_config=None):
    return restore_model(read(path), expected_config)
