"""Model checkpoints: a JSON manifest plus one little-endian float64 blob per tensor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError

MANIFEST = "manifest.json"


def save(directory, manifest, params):
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, value in sorted(params.items()):
        arr = np.ascontiguousarray(value, dtype="<f8")
        arr.tofile(directory / "params" / f"{name}.f64")
        shapes[name] = list(arr.shape)
    body = dict(manifest)
    body["tensors"] = shapes
    (directory / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True))
    return directory


def load(directory):
    """Return ``(manifest, params)``; sizes are checked against the recorded shapes."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    params = {}
    for name, shape in manifest.get("tensors", {}).items():
        raw = np.fromfile(directory / "params" / f"{name}.f64", dtype="<f8")
        if raw.size != int(np.prod(shape)):
            raise ContractError(f"blob {name} holds {raw.size} values, manifest says {shape}")
        params[name] = raw.reshape(shape).astype(np.float64)
    return manifest, params
