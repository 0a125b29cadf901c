"""Checkpoint directories: ``manifest.json`` plus ``params.bin``.

``params.bin`` holds little-endian float32 values of every tensor,
concatenated in manifest order; the manifest records name, shape and element
offset for each tensor along with the architecture config and metadata.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

FORMAT = "lcgan-checkpoint/1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Dict[str, np.ndarray], architecture: dict,
                    metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += flat.size
        chunks.append(flat.tobytes())
    manifest = {
        "format": FORMAT,
        "architecture": architecture,
        "tensors": table,
        "total_elements": offset,
        "metadata": metadata or {},
    }
    tmp_bin = path / "params.bin.tmp"
    with open(tmp_bin, "wb") as fh:
        for c in chunks:
            fh.write(c)
    tmp_bin.replace(path / "params.bin")
    tmp_manifest = path / "manifest.json.tmp"
    with open(tmp_manifest, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    tmp_manifest.replace(path / "manifest.json")
    return path


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", dict, dict]:
    """Return ``(tensors, architecture, metadata)``."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    bin_path = path / "params.bin"
    if not manifest_path.is_file() or not bin_path.is_file():
        raise CheckpointError(f"{path} is not a checkpoint directory")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.fromfile(bin_path, dtype="<f4")
    if flat.size != manifest["total_elements"]:
        raise CheckpointError(f"{path}: params.bin has {flat.size} values, manifest expects "
                              f"{manifest['total_elements']}")
    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        tensors[entry["name"]] = flat[start:start + count].astype(np.float32).reshape(entry["shape"])
    return tensors, manifest["architecture"], manifest.get("metadata", {})


def prefixed(prefix: str, state: Dict[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((f"{prefix}.{k}", v) for k, v in state.items())


def strip_prefix(prefix: str, tensors: Dict[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    head = prefix + "."
    return OrderedDict((k[len(head):], v) for k, v in tensors.items() if k.startswith(head))
