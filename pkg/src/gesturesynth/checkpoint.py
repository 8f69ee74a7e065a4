"""Checkpoint files: a JSON manifest plus per-parameter tensor snapshots.

A tensor snapshot is the JSON object ``{"shape": [...], "data": [...]}``
with data flattened row-major; the same encoding backs test fixtures.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = [
    "tensor_snapshot",
    "snapshot_to_array",
    "save_checkpoint",
    "load_checkpoint",
]


def tensor_snapshot(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def snapshot_to_array(snap):
    shape = tuple(int(n) for n in snap["shape"])
    data = np.asarray(snap["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"snapshot: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def save_checkpoint(path, state, manifest):
    """Write ``{manifest, params}`` where params are tensor snapshots."""
    payload = {
        "manifest": dict(manifest),
        "params": {name: tensor_snapshot(arr) for name, arr in state.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    params = {
        name: snapshot_to_array(snap) for name, snap in payload["params"].items()
    }
    return payload["manifest"], params
