"""Checkpoint file format.

Line 1 is a compact JSON manifest terminated by ``\\n``::

    {"format_version": 1, "config": {...},
     "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}

The rest of the file is one little-endian, row-major blob holding every
tensor in manifest order; ``offset`` is relative to the start of the blob.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, VersionError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = arr.dtype.name
        if kind not in _DTYPES:
            raise DataError(f"tensor {name}: unsupported dtype {kind}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "config": config, "tensors": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for raw in chunks:
            fh.write(raw)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        manifest = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VersionError(f"{path}: not a checkpoint (unreadable manifest)") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    manifest = read_manifest(path)
    raw = path.read_bytes()
    blob = raw[raw.index(b"\n") + 1:]
    tensors = {}
    for e in manifest["tensors"]:
        buf = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise VersionError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(e["dtype"])
    return tensors, manifest["config"]
