"""Tensor archive: ``manifest.json`` plus one flat little-endian float32 blob.

The manifest lists every array's name, shape, dtype and byte offset, and may
carry arbitrary JSON metadata. Writes go through a temp file and
``os.replace`` so an interrupted save never leaves a half-written file.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT = "speechinsert-archive/1"
_DTYPE = np.dtype("<f4")


def atomic_write_bytes(path: str | os.PathLike, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_archive(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write ``arrays`` (in insertion order) to the archive directory ``path``."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "byteorder": "little", "blob": BLOB,
                "tensors": entries, "meta": meta or {}}
    path = Path(path)
    atomic_write_bytes(path / BLOB, b"".join(chunks))
    atomic_write_text(path / MANIFEST, dumps_json(manifest))


def load_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read archive manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise ParseError(f"{path}: unknown archive format {manifest.get('format')!r}")
    try:
        blob = (path / manifest["blob"]).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read archive blob in {path}: {exc}") from exc
    arrays = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise ParseError(f"{path}: tensor {entry['name']} runs past the end of the blob")
        flat = np.frombuffer(blob[start:start + n], dtype=_DTYPE)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float32)
    return arrays, manifest["meta"]
