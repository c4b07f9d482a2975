"""Checkpoint files: a JSON manifest followed by little-endian float64 arrays.

Layout::

    b"RVQDIFF-CKPT\\n"
    uint64 little-endian: manifest length in bytes
    manifest (UTF-8 JSON, sorted keys)
    payload: arrays in manifest order, each '<f8', C order

The manifest lists ``name``, ``shape`` and ``dtype`` per array, the SHA-256
of the payload, and a free-form ``meta`` mapping.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"RVQDIFF-CKPT\n"
DTYPE = "<f8"


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    entries, chunks = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE))
        entries.append({"name": name, "shape": list(a.shape), "dtype": DTYPE})
        chunks.append(a.tobytes(order="C"))
    payload = b"".join(chunks)
    manifest = {
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def loads(blob: bytes):
    """Parse checkpoint bytes into ``(arrays, meta)``; raise ``IntegrityError`` on any defect."""
    if not blob.startswith(MAGIC):
        raise IntegrityError("bad checkpoint magic")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise IntegrityError("truncated checkpoint header")
    (n_head,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        manifest = json.loads(blob[pos:pos + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint manifest: {exc}") from exc
    payload = blob[pos + n_head:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise IntegrityError("checkpoint payload checksum mismatch")
    arrays, off = {}, 0
    for entry in manifest["arrays"]:
        if entry["dtype"] != DTYPE:
            raise IntegrityError(f"unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(payload):
            raise IntegrityError(f"payload too short for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype=DTYPE, count=nbytes // 8, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(payload):
        raise IntegrityError("trailing bytes after last array")
    return arrays, manifest["meta"]


def save(path, arrays: dict, meta: dict | None = None):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path):
    return loads(Path(path).read_bytes())
