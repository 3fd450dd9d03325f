"""Flat named-parameter checkpoints.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then the raw
little-endian float64 payload of every parameter in header order::

    {"schema": "ktimpute.checkpoint/1",
     "params": [{"name": "enc.l0.W_i", "shape": [16, 22], "offset": 0}, ...],
     "meta": {...}}

``offset`` counts float64 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

SCHEMA = "ktimpute.checkpoint/1"


class CheckpointError(ValueError):
    pass


def dumps(named: Sequence[tuple[str, np.ndarray]], meta: Mapping[str, Any] | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    seen = set()
    for name, arr in named:
        if name in seen:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        seen.add(name)
        # ascontiguousarray promotes 0-d input to 1-d, so restore the shape
        a = np.ascontiguousarray(arr, dtype="<f8").reshape(np.shape(arr))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps(
        {"schema": SCHEMA, "params": entries, "meta": dict(meta or {})}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    if header.get("schema") != SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {header.get('schema')!r}")
    payload = np.frombuffer(blob[8 + hlen :], dtype="<f8")
    params = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"payload too short for {e['name']!r}")
        params[e["name"]] = payload[start : start + size].reshape(e["shape"]).astype(np.float64)
    return params, header["meta"]


def save(path, named, meta=None) -> None:
    Path(path).write_bytes(dumps(named, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
