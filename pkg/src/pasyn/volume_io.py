"""Flat little-endian float32 volumes with a JSON header sidecar.

``name.vol`` (or ``name.vol16``) holds the raw C-ordered samples and
``name.vol.json`` the header with at least ``shape``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_volume(path, array, **header) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {"shape": list(arr.shape), **header}
    path.write_bytes(arr.tobytes())
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True))


def load_volume(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(header_path(path).read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} samples do not match header shape {shape}")
    return data.reshape(shape).astype(np.float32), header
