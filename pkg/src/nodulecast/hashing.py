"""Content hashing and canonical JSON helpers shared across the package."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_path(path: str | Path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Stable sub-seed from (master seed, stage name, index)."""
    digest = hashlib.sha256(f"{master_seed}:{stage}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)
