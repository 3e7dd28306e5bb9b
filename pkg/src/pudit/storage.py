"""On-disk dataset: ``manifest.json`` plus a ``data.bin`` blob file.

``data.bin`` is the concatenation, in record order, of little-endian
float32 tensors. Each manifest record lists its blobs with byte offset,
byte length, shape and CRC32, alongside JSON metadata (prompts, scene,
task or motion).
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, CorruptManifest, TruncatedBlob
from .data import EditPairSample, EditTask, SceneSpec, VideoClip

MANIFEST = "manifest.json"
BLOBS = "data.bin"
VERSION = 1

_LE_F32 = np.dtype("<f4")


def _record(sample) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if isinstance(sample, EditPairSample):
        meta = {"src_prompt": sample.src_prompt.tolist(), "edit_prompt": sample.edit_prompt.tolist(),
                "scene": sample.scene.to_dict(), "task": sample.task.to_dict()}
        return {"kind": "pair", "meta": meta}, [("src_image", sample.src_image), ("edit_image", sample.edit_image),
                                                ("edit_mask", sample.edit_mask)]
    if isinstance(sample, VideoClip):
        meta = {"caption": sample.caption.tolist(), "motion": [list(m) for m in sample.motion], "scene": sample.scene.to_dict()}
        return {"kind": "clip", "meta": meta}, [("frames", sample.frames)]
    raise TypeError(f"cannot serialize {type(sample).__name__}")


def _sample(kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    if kind == "pair":
        return EditPairSample(src_image=arrays["src_image"], edit_image=arrays["edit_image"],
                              src_prompt=np.asarray(meta["src_prompt"], dtype=np.int64),
                              edit_prompt=np.asarray(meta["edit_prompt"], dtype=np.int64),
                              edit_mask=arrays["edit_mask"], scene=SceneSpec.from_dict(meta["scene"]),
                              task=EditTask.from_dict(meta["task"]))
    if kind == "clip":
        return VideoClip(frames=arrays["frames"], caption=np.asarray(meta["caption"], dtype=np.int64),
                         motion=tuple(tuple(int(v) for v in m) for m in meta["motion"]), scene=SceneSpec.from_dict(meta["scene"]))
    raise CorruptManifest(f"unknown record kind {kind!r}")


def write_dataset(directory, samples, config: dict | None = None) -> Path:
    """Write ``samples`` (edit pairs and/or clips) to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    tmp_bin = directory / (BLOBS + ".tmp")
    with open(tmp_bin, "wb") as fh:
        for sample in samples:
            rec, arrays = _record(sample)
            rec["blobs"] = []
            for name, arr in arrays:
                raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
                fh.write(raw)
                rec["blobs"].append({"name": name, "offset": offset, "length": len(raw), "shape": list(arr.shape),
                                     "crc32": zlib.crc32(raw)})
                offset += len(raw)
            records.append(rec)
    manifest = {"version": VERSION, "config": config or {}, "records": records}
    tmp_manifest = directory / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    os.replace(tmp_bin, directory / BLOBS)
    os.replace(tmp_manifest, directory / MANIFEST)
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"cannot read {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != VERSION or not isinstance(manifest.get("records"), list):
        raise CorruptManifest(f"{path}: missing version/records or unsupported version")
    return manifest


def read_dataset(directory) -> tuple[list, dict]:
    """Load samples and the stored config; verifies sizes and CRC32 of every blob."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        blob = (directory / BLOBS).read_bytes()
    except OSError as exc:
        raise TruncatedBlob(f"cannot read {BLOBS}: {exc}") from exc
    samples = []
    for i, rec in enumerate(manifest["records"]):
        try:
            kind, meta, blobs = rec["kind"], rec["meta"], rec["blobs"]
            arrays = {}
            for b in blobs:
                start, length, shape = int(b["offset"]), int(b["length"]), tuple(int(s) for s in b["shape"])
                if start < 0 or start + length > len(blob):
                    raise TruncatedBlob(f"record {i} blob {b['name']!r} ends at {start + length}, file has {len(blob)} bytes")
                raw = blob[start : start + length]
                if zlib.crc32(raw) != int(b["crc32"]):
                    raise ChecksumMismatch(f"record {i} blob {b['name']!r} fails CRC32")
                if length != 4 * int(np.prod(shape, dtype=np.int64)):
                    raise CorruptManifest(f"record {i} blob {b['name']!r}: {length} bytes for shape {shape}")
                arrays[b["name"]] = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32).reshape(shape)
            samples.append(_sample(kind, meta, arrays))
        except (KeyError, TypeError) as exc:
            raise CorruptManifest(f"record {i} malformed: {exc}") from exc
    return samples, manifest["config"]


def dataset_digest(directory) -> str:
    h = hashlib.sha256()
    for name in (MANIFEST, BLOBS):
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()
