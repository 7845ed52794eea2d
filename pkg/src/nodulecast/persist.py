"""On-disk dataset layout: 16-bit PNG images plus newline-delimited JSON.

A dataset directory contains::

    images/<sample_id>_baseline.png    16-bit grayscale
    images/<sample_id>_followup.png
    metadata.ndjson                    one object per record
    manifest.json                      seed, parameters, schema_version

Pixel values are stored as ``round(v * 65535)``; loading divides back, so a
save/load round trip quantizes images to 1/65535 once and is idempotent
afterwards.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .ehr import EhrRecord
from .hashing import canonical_json, sha256_text
from .synthetic import NoduleRecord

SCHEMA_VERSION = 1


def write_png16(path: str | Path, image: np.ndarray) -> None:
    """Write a [0,1] float image as 16-bit grayscale PNG."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path, format="PNG")


def read_png16(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.uint16)
    return (arr.astype(np.float32) / 65535.0).astype(np.float32)


def save_dataset(
    out_dir: str | Path,
    records: list[NoduleRecord],
    split_of: dict[str, str],
    manifest_params: dict,
) -> str:
    """Persist records and return the dataset content hash.

    ``split_of`` maps sample_id -> split name; ``manifest_params`` carries at
    least the generating seed and parameters. The returned hash covers the
    manifest content including per-record metadata and image digests.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for rec in records:
        write_png16(img_dir / f"{rec.sample_id}_baseline.png", rec.baseline_image)
        write_png16(img_dir / f"{rec.sample_id}_followup.png", rec.followup_image)
        row = {"sample_id": rec.sample_id, "patient_id": rec.patient_id}
        row.update(rec.ehr.to_row())
        row["label"] = int(rec.label)
        row["split"] = split_of[rec.sample_id]
        rows.append(row)

    with open(out_dir / "metadata.ndjson", "w") as f:
        for row in rows:
            f.write(canonical_json(row) + "\n")

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "parameters": manifest_params,
        "n_records": len(records),
        "metadata_sha256": sha256_text(
            "".join(canonical_json(r) + "\n" for r in rows)
        ),
    }
    content_hash = sha256_text(canonical_json(manifest))
    manifest["content_hash"] = content_hash
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, out_dir / "manifest.json")
    return content_hash


def load_dataset(data_dir: str | Path) -> tuple[list[NoduleRecord], dict[str, str], dict]:
    """Load a persisted dataset: (records, sample_id->split, manifest)."""
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    records, split_of = [], {}
    with open(data_dir / "metadata.ndjson") as f:
        for line in f:
            row = json.loads(line)
            sid = row["sample_id"]
            rec = NoduleRecord(
                baseline_image=read_png16(data_dir / "images" / f"{sid}_baseline.png"),
                followup_image=read_png16(data_dir / "images" / f"{sid}_followup.png"),
                ehr=EhrRecord.from_row(row),
                label=int(row["label"]),
                patient_id=row["patient_id"],
                sample_id=sid,
            )
            records.append(rec)
            split_of[sid] = row["split"]
    return records, split_of, manifest


def dataset_hash(data_dir: str | Path) -> str:
    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)["content_hash"]
