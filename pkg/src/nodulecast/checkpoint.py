"""Single-file checkpoint format: JSON header plus raw float32 arrays.

Layout::

    8-byte magic  b"NCCKPT01"
    8-byte little-endian uint64 header length
    header JSON   {"format_version", "arrays": [{name, shape}], "meta": {...}}
    payload       concatenated little-endian float32 array data

Files are written via a temp-then-rename so readers never observe a partial
checkpoint; the file's sha256 is its identity for manifest tracking.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NCCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(shape)
            arrays[entry["name"]] = data.copy()
    return arrays, header["meta"]


def state_dict_to_arrays(state: dict, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in state.items()}


def load_arrays_into(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    import torch

    state = {}
    for k in module.state_dict():
        key = prefix + k
        if key not in arrays:
            raise KeyError(f"checkpoint missing array {key!r}")
        state[k] = torch.from_numpy(np.array(arrays[key], dtype=np.float32))
    module.load_state_dict(state)
