"""Versioned binary container for named arrays plus JSON metadata.

Layout (little-endian)::

    8 bytes   magic  b"LACARECK"
    uint32    format version
    uint64    header length n
    n bytes   UTF-8 JSON header {"meta": ..., "arrays": [{name, dtype, shape, offset}]}
    ...       raw C-order array payloads, offsets relative to payload start

The header is serialized with sorted keys, so identical content gives
identical bytes.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"LACARECK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    payloads = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        a = a.astype(dt, copy=False)
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        payloads.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo + count * dt.itemsize > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {e['name']!r}")
        a = np.frombuffer(blob, dtype=dt, count=count, offset=lo).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dt.newbyteorder("="), copy=True)
    return arrays, header["meta"]
