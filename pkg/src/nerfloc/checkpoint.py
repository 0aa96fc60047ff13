"""Checkpoint format: ``<stem>.json`` manifest plus ``<stem>.bin`` blob.

The manifest lists every tensor (name, shape, dtype, byte offset) and a free
``config`` object; the blob holds the tensors as little-endian float32 in
manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import MissingCheckpoint

FORMAT_VERSION = 1


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    # append rather than replace: dots inside the stem are part of the name
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], config: dict | None = None,
                    kind: str = "") -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(arr.tobytes(order="C"))
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
            offset += arr.nbytes
    manifest = {"format": FORMAT_VERSION, "kind": kind, "config": config or {}, "tensors": entries}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, str]:
    """Returns ``(tensors, config, kind)``."""
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists() or not blob_path.exists():
        raise MissingCheckpoint(f"checkpoint {manifest_path.with_suffix('')} not found")
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest.get("config", {}), manifest.get("kind", "")
