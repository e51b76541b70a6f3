"""Parameter checkpoints: a JSON manifest plus a flat little-endian float64 payload."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = base.with_suffix(".bin")
    payload.write_bytes(b"".join(chunks))
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float64",
        "byte_order": "little",
        "payload": payload.name,
        "total_bytes": offset,
        "parameters": entries,
    }
    if extra:
        manifest["extra"] = extra
    out = base.with_suffix(".json")
    out.write_text(json.dumps(manifest, indent=2))
    return out


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    manifest = json.loads(base.with_suffix(".json").read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    raw = (base.parent / manifest["payload"]).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError("checkpoint payload size does not match manifest")
    arrays = {}
    for entry in manifest["parameters"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        flat = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = flat.reshape(tuple(entry["shape"])).astype(np.float64)
    return arrays, manifest.get("extra", {})
