"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"HULALITE"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON (sorted keys): model config, threshold, tensor table
    payload   every tensor as little-endian float64, in tensor-table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import ModelConfig, Params

MAGIC = b"HULALITE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: Params, cfg: ModelConfig, threshold: float | None = None, meta: dict | None = None) -> bytes:
    names = sorted(params)
    header = {
        "config": cfg.to_json(),
        "threshold": threshold,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for n in names:
        chunks.append(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> tuple[Params, ModelConfig, float | None, dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, head_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 16
    header = json.loads(blob[start : start + head_len].decode("utf-8"))
    offset = start + head_len
    params: Params = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint at tensor {t['name']!r}")
        params[t["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return params, ModelConfig.from_json(header["config"]), header["threshold"], header["meta"]


def save(path: str | Path, params: Params, cfg: ModelConfig, threshold: float | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, cfg, threshold, meta))


def load(path: str | Path) -> tuple[Params, ModelConfig, float | None, dict]:
    return loads(Path(path).read_bytes())
