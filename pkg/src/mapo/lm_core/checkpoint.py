"""Byte-deterministic checkpoint format.

torch.save zip archives are convenient but not guaranteed byte-stable, and
the determinism contract requires identical checkpoints across identical
runs. A checkpoint directory holds params.bin (all tensors concatenated as
little-endian float64 in state-dict order) and manifest.json describing
shapes, the model config, and run metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"


def dump_json(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_checkpoint(directory: Path, module: nn.Module, meta: dict[str, Any]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float64).numpy()
        blobs.append(arr.astype("<f8").tobytes())
        entries.append({"name": name, "shape": list(arr.shape)})
    blob = b"".join(blobs)
    (directory / PARAMS_FILE).write_bytes(blob)
    manifest = dict(meta)
    manifest["tensors"] = entries
    manifest["params_sha256"] = hashlib.sha256(blob).hexdigest()
    (directory / MANIFEST_FILE).write_text(dump_json(manifest), encoding="utf-8")


def load_manifest(directory: Path) -> dict[str, Any]:
    return json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))


def load_checkpoint(directory: Path, module: nn.Module) -> dict[str, Any]:
    """Load params.bin into the module; returns the manifest."""
    manifest = load_manifest(directory)
    blob = (directory / PARAMS_FILE).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["params_sha256"]:
        raise ValueError(f"checkpoint {directory} is corrupt (digest mismatch)")
    state = {}
    offset = 0
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        state[entry["name"]] = torch.from_numpy(arr.copy()).reshape(entry["shape"])
    ref = module.state_dict()
    module.load_state_dict({k: v.to(ref[k].dtype) for k, v in state.items()})
    return manifest
