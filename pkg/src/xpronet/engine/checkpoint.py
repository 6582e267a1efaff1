"""Versioned parameter container.

Layout: the magic line ``XPRO-CKPT-1``, a little-endian uint64 header length,
a UTF-8 JSON header (parameter names, shapes, offsets, free-form metadata),
then the concatenated little-endian float64 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"XPRO-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in params:
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    header = json.dumps({"params": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an XPRO-CKPT-1 file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = np.frombuffer(raw[pos + hlen :], dtype="<f8")
    out = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"{path}: payload truncated at {e['name']}")
        out[e["name"]] = payload[start : start + size].reshape(e["shape"]).astype(np.float64)
    return out, header.get("meta", {})
