"""Flat tensor files and parameter-group checkpoints.

File format: one ASCII JSON header line ``{"shape": [...]}`` terminated by
``\\n``, followed by the raw little-endian float32 payload in row-major
order. Checkpoints are a directory of such files plus a ``manifest.json``
listing ``{"name", "shape", "file"}`` per parameter group.
"""

import json
import os

import numpy as np


def save_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape)})
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Load a tensor file; returns float64 (lossless widening of the f32 payload)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        shape = tuple(int(s) for s in header["shape"])
        payload = fh.read()
    count = int(np.prod(shape)) if shape else 1
    flat = np.frombuffer(payload, dtype="<f4", count=count)
    return flat.reshape(shape).astype(np.float64)


def save_param_groups(directory, named_arrays, extra=None) -> str:
    """Write one tensor file per (name, array) pair plus a manifest.

    ``extra`` is merged into the manifest for non-tensor metadata
    (hyperparameters, flags). Returns the manifest path.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, arr in named_arrays:
        fname = name.replace("/", "_").replace(".", "_") + ".bin"
        save_tensor(os.path.join(directory, fname), arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "file": fname})
    manifest = {"params": entries}
    if extra:
        manifest.update(extra)
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_param_groups(directory):
    """Inverse of :func:`save_param_groups`: returns (dict name->array, manifest dict)."""
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    arrays = {}
    for entry in manifest["params"]:
        arr = load_tensor(os.path.join(directory, entry["file"]))
        if list(arr.shape) != list(entry["shape"]):
            raise ValueError(
                f"checkpoint entry {entry['name']!r}: file shape {list(arr.shape)} "
                f"!= manifest shape {entry['shape']}"
            )
        arrays[entry["name"]] = arr
    return arrays, manifest
