"""Manifest-plus-blob checkpoint container (format ``arcslot-v1``).

Layout: an 8-byte little-endian manifest length, the UTF-8 JSON manifest, then
the blob. The manifest's first key is ``version``; each tensor entry lists its
name, dtype ``f32``, shape and byte offset into the blob, whose values are
row-major little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

VERSION = "arcslot-v1"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F32)
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": VERSION, "meta": dict(meta or {}), "tensors": entries}
    head = json.dumps(manifest, sort_keys=False).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_head(fh)[0]


def _read_head(fh) -> tuple[dict, int]:
    prefix = fh.read(8)
    if len(prefix) != 8:
        raise CheckpointError("truncated checkpoint header")
    (size,) = struct.unpack("<Q", prefix)
    try:
        manifest = json.loads(fh.read(size).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest, 8 + size


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        manifest, start = _read_head(fh)
        blob = fh.read()
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"tensor {entry['name']}: unsupported dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, manifest.get("meta", {})
