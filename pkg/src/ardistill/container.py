"""The "DDTC" checkpoint container shared by teachers and students.

Layout (little-endian)::

    magic  b"DDTC"
    u32    container version
    u64    header length in bytes
    bytes  UTF-8 JSON header: {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    bytes  raw array data, in header order

The JSON is written with sorted keys so identical content gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DDTC"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


def pack(kind: str, meta: dict, arrays: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in "|<=" else a.dtype
        raw = a.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": np.dtype(dt).str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return _HEAD.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def unpack(buf: bytes):
    """Returns (kind, meta, arrays)."""
    if len(buf) < _HEAD.size:
        raise ContainerError("checkpoint truncated")
    magic, version, hlen = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    start = _HEAD.size
    header = json.loads(buf[start:start + hlen].decode())
    body = memoryview(buf)[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ContainerError(f"array {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["kind"], header["meta"], arrays


def save(path, kind, meta, arrays) -> bytes:
    data = pack(kind, meta, arrays)
    Path(path).write_bytes(data)
    return data


def load(path):
    return unpack(Path(path).read_bytes())


def fingerprint(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
