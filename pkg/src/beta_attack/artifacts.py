"""Deterministic on-disk formats: JSON headers plus little-endian float64 blobs."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DependencyError


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | Path, obj) -> None:
    atomic_write(path, dumps(obj))


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def write_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    """Store ``arrays`` as ``<path>.json`` (layout + header) and ``<path>.bin``.

    Arrays are written in the given order, C-contiguous, as ``<f8``; boolean
    and integer arrays are stored as floats and flagged so they round-trip.
    """
    path = Path(path)
    layout, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = "bool" if arr.dtype == bool else ("int" if np.issubdtype(arr.dtype, np.integer) else "float")
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset, "kind": kind})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    meta = {"header": dict(header or {}), "arrays": layout, "sha256": hashlib.sha256(blob).hexdigest(),
            "format": "f64-le"}
    atomic_write(path.with_suffix(".bin"), blob)
    atomic_write(path.with_suffix(".json"), dumps(meta))


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise DependencyError(f"checksum mismatch for {path.with_suffix('.bin')}")
    out = {}
    for item in meta["arrays"]:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=item["offset"]).reshape(item["shape"]).copy()
        if item["kind"] == "bool":
            arr = arr.astype(bool)
        elif item["kind"] == "int":
            arr = arr.astype(np.int64)
        out[item["name"]] = arr
    return out, meta["header"]


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
