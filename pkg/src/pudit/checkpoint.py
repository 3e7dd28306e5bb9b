"""Checkpoint file format.

Layout::

    b"IVE1"                       4-byte magic
    header length                 uint64, little-endian
    header                        UTF-8 JSON (sorted keys)
    blobs                         little-endian float32 tensors, back to back

The header carries the run metadata and a tensor directory
(name, shape, offset from the start of the blob section, byte length,
CRC32). Writes go to a temp file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, CorruptCheckpoint, TruncatedBlob

MAGIC = b"IVE1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw),
                          "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": meta, "tensors": directory}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(tensors, meta)``; every blob is CRC-verified."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise TruncatedBlob(f"{path}: header runs past end of file")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        entries = header["tensors"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported format version {header.get('format_version')}")
    base = 12 + hlen
    tensors = {}
    for e in entries:
        start = base + int(e["offset"])
        end = start + int(e["length"])
        if end > len(data):
            raise TruncatedBlob(f"{path}: tensor {e['name']!r} truncated")
        raw = data[start:end]
        if zlib.crc32(raw) != int(e["crc32"]):
            raise ChecksumMismatch(f"{path}: tensor {e['name']!r} fails CRC32")
        tensors[e["name"]] = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32).reshape(e["shape"])
    return tensors, meta


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensor_digest(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
