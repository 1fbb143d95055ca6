"""Manifest (JSON) + little-endian float32 sidecar checkpoints."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "marlprune-checkpoint"


def _paths(prefix) -> tuple[Path, Path]:
    p = Path(prefix)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save_checkpoint(prefix, arrays: dict, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.bin``; arrays are stored in the given order."""
    manifest_path, bin_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(buf)
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                            "offset": offset, "nbytes": len(buf)})
            offset += len(buf)
    manifest = {"format": FORMAT, "version": 1, "byteorder": "little", "binary": bin_path.name,
                "total_bytes": offset, "params": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=False) + "\n")
    return manifest_path, bin_path


def load_checkpoint(prefix) -> tuple[dict, dict]:
    """Returns ``(arrays, meta)`` with float32 arrays in manifest order."""
    manifest_path, bin_path = _paths(prefix)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not a {FORMAT} manifest")
    raw = (manifest_path.parent / manifest.get("binary", bin_path.name)).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(f"{bin_path}: expected {manifest['total_bytes']} bytes, found {len(raw)}")
    arrays = {}
    for e in manifest["params"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})


def param_hash(arrays: dict, prefix: str = "") -> str:
    """SHA-256 over names and float32 bytes of the arrays whose name starts with ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()
