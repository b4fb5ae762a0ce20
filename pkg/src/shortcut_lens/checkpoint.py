"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SLCKPT01"                 8-byte magic
    uint64                      manifest length in bytes
    manifest                    UTF-8 JSON: {"meta": {...}, "arrays": [entry, ...]}
    blob                        raw array bytes, concatenated in manifest order

Each manifest entry is ``{"key", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the start of the blob. Arrays are stored
little-endian (float32 for network parameters), so a save/load round trip
is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SLCKPT01"
ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}


class CheckpointError(Exception):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for key, value in arrays.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<", "=") else arr.dtype
        arr = np.asarray(arr, dtype=dtype)
        code = arr.dtype.str
        if code not in ALLOWED_DTYPES:
            raise CheckpointError(f"array {key!r} has unsupported dtype {code}")
        raw = arr.tobytes()
        entries.append({"key": key, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    if len({e["key"] for e in entries}) != len(entries):
        raise CheckpointError("duplicate array keys")
    manifest = json.dumps({"meta": dict(meta or {}), "arrays": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def decode(data: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint container (bad magic)")
    if len(data) < 16:
        raise CheckpointError(f"{source} is truncated")
    (length,) = struct.unpack("<Q", data[8:16])
    if 16 + length > len(data):
        raise CheckpointError(f"{source} is truncated inside the manifest")
    try:
        manifest = json.loads(data[16 : 16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source} has a corrupt manifest") from exc
    blob = memoryview(data)[16 + length :]
    arrays = {}
    for entry in manifest["arrays"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"{source} is truncated inside array {entry['key']!r}")
        arr = np.frombuffer(blob[start:stop], dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"]))
        arrays[entry["key"]] = arr.copy()
    return arrays, manifest["meta"]


def save_container(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, encode(arrays, meta))


def load_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), str(path))


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
