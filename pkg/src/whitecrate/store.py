"""Manifest + blob container used for both checkpoints and datasets.

A container is a directory holding ``manifest.json`` (names, dtypes, shapes,
byte offsets and free-form metadata) and ``blob.bin`` (the raw little-endian
array bytes concatenated in manifest order).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["save_arrays", "load_arrays", "MANIFEST", "BLOB"]

MANIFEST = "manifest.json"
BLOB = "blob.bin"
FORMAT = "whitecrate-arrays"
_DTYPES = {"<f8": np.float64, "|u1": np.uint8, "<i8": np.int64}


def _canonical(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == np.float64 or np.issubdtype(a.dtype, np.floating):
        return np.ascontiguousarray(a, dtype="<f8")
    if a.dtype == np.uint8:
        return np.ascontiguousarray(a, dtype="|u1")
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return np.ascontiguousarray(a, dtype="<i8")
    raise FormatError(f"unsupported dtype {a.dtype}")


def save_arrays(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            a = _canonical(arr)
            raw = a.tobytes(order="C")
            entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT, "version": 1, "meta": meta or {}, "tensors": entries, "blob_bytes": offset}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: not a {FORMAT} manifest")
    return manifest


def load_arrays(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"{directory / BLOB}: expected {manifest['blob_bytes']} bytes, found {len(blob)}")
    out = {}
    for e in manifest["tensors"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise FormatError(f"tensor {e['name']}: unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * np.dtype(e["dtype"]).itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(blob):
            raise FormatError(f"tensor {e['name']}: inconsistent size or offset")
        arr = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = arr.astype(dtype)
    return out, manifest["meta"]
