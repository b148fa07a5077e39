"""Versioned checkpoint container.

Layout::

    PASYN-CKPT-1\\n
    <uint64 LE header length><UTF-8 JSON header>
    <float32 LE blobs, concatenated in header order>

The JSON header holds the architecture description, arbitrary metadata and
an index ``[{"name", "shape", "offset"}]`` into the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PASYN-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arch: dict, arrays: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arch": arch, "meta": meta or {}, "tensors": index},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(arch, arrays, meta)``; raises :class:`CheckpointError` on any corruption."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a PASYN-CKPT-1 file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        tensors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    data = raw[pos + hlen :]
    arrays = {}
    for t in tensors:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        start = t["offset"]
        if start < 0 or start + n > len(data):
            raise CheckpointError(f"{path}: tensor {t['name']!r} out of bounds")
        arrays[t["name"]] = np.frombuffer(data[start : start + n], dtype="<f4").reshape(t["shape"]).copy()
    expected = sum(int(np.prod(t["shape"], dtype=np.int64)) * 4 for t in tensors)
    if len(data) != expected:
        raise CheckpointError(f"{path}: blob section has {len(data)} bytes, expected {expected}")
    return header.get("arch", {}), arrays, header.get("meta", {})
