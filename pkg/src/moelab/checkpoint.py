"""Checkpoint container and its on-disk format.

A checkpoint is a directory holding two files:

``manifest.json``
    ``{"format": 1, "kind", "meta", "tensors": [...], "state": [...], "checksum"}``.
    Each tensor entry is ``{"name", "shape", "dtype", "offset", "nbytes"}``;
    offsets index into the blob. ``checksum`` is ``sha256:<hex>`` of the blob.

``tensors.bin``
    Little-endian raw tensor bytes, concatenated in manifest order
    (model parameters first, then optimizer state).

Writing is deterministic: same contents, same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


@dataclass
class Checkpoint:
    kind: str  # "dense" | "moe"
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("dense", "moe"):
            raise ValueError(f"checkpoint kind must be 'dense' or 'moe', got {self.kind!r}")

    @property
    def arch(self) -> dict:
        return self.meta.get("arch", {})

    @property
    def n_experts(self) -> int | None:
        return self.arch.get("n_experts")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.kind, {k: v.copy() for k, v in self.params.items()},
                          json.loads(json.dumps(self.meta)),
                          {k: v.copy() for k, v in self.state.items()})


def _entries(tensors: dict[str, np.ndarray], offset: int):
    entries, chunks = [], []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unsupported dtype {dtype_name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks, offset


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    param_entries, param_chunks, end = _entries(ckpt.params, 0)
    state_entries, state_chunks, _ = _entries(ckpt.state, end)
    blob = b"".join(param_chunks + state_chunks)
    manifest = {
        "format": FORMAT_VERSION,
        "kind": ckpt.kind,
        "meta": ckpt.meta,
        "tensors": param_entries,
        "state": state_entries,
        "checksum": "sha256:" + hashlib.sha256(blob).hexdigest(),
    }
    tmp_blob = path / (BLOB + ".tmp")
    tmp_blob.write_bytes(blob)
    os.replace(tmp_blob, path / BLOB)
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp_manifest, path / MANIFEST)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path / MANIFEST}: not valid JSON ({exc})") from exc


def load_checkpoint(path, verify: bool = True) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = (path / BLOB).read_bytes()
    if verify:
        digest = "sha256:" + hashlib.sha256(blob).hexdigest()
        if digest != manifest["checksum"]:
            raise CheckpointFormatError(f"{path}: checksum mismatch ({digest} != {manifest['checksum']})")

    def read(entries):
        out = {}
        for e in entries:
            end = e["offset"] + e["nbytes"]
            if end > len(blob):
                raise CheckpointFormatError(f"{path}: tensor {e['name']} runs past end of blob")
            arr = np.frombuffer(blob, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)),
                                offset=e["offset"])
            out[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
        return out

    return Checkpoint(manifest["kind"], read(manifest["tensors"]), manifest["meta"], read(manifest.get("state", [])))


def checkpoint_checksum(path) -> str:
    return read_manifest(path)["checksum"]
