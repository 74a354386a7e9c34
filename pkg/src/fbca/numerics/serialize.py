"""Weights on disk: a JSON manifest plus one little-endian float blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "fbca-weights/1"


def save_weights(state: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, arr in state.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": np.dtype(arr.dtype).name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "blob": blob_path.name, "tensors": entries, "meta": meta or {}}
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, blob_path


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a manifest (``.json``) and its blob; returns (state, meta)."""
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unsupported weights format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise ValueError(f"{entry['name']}: blob truncated")
        arr = np.frombuffer(blob[entry["offset"]:end], dtype=dtype).reshape(entry["shape"])
        state[entry["name"]] = arr.astype(np.dtype(entry["dtype"]))
    return state, manifest.get("meta", {})
