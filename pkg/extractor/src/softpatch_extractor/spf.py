"""Writers for the SPF1 feature format and manifest JSON.

These mirror the published interface of the downstream scoring library
(softpatch): SPF1 is magic ``b"SPF1"``, four little-endian u64 dims
(N, h, w, c), then float32 payload in C order; manifests are strict JSON
with ``schema_version: 1``. The extractor only writes these files, it never
links against the consumer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

SPF1_MAGIC = b"SPF1"
MANIFEST_SCHEMA_VERSION = 1


def write_spf1(array: np.ndarray, path: str | Path) -> None:
    """Write an (N, h, w, c) float array as an SPF1 file."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise ValueError(f"SPF1 tensors must be 4-d with positive dims, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("SPF1 payload must be finite")
    header = SPF1_MAGIC + struct.pack("<4Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def write_manifest(
    path: str | Path,
    name: str,
    split: str,
    records: list[dict],
    seed: int = 0,
    noise_ratio: float = 0.0,
    overlap_mode: str = "none",
) -> None:
    """Write a manifest document; record dicts must already carry
    id/label/origin/feature_ref/mask_ref."""
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "name": name,
        "split": split,
        "noise_ratio": noise_ratio,
        "overlap_mode": overlap_mode,
        "seed": seed,
        "records": records,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def feature_record(
    sample_id: str,
    label: str,
    origin: str,
    feature_file: str,
    row: int,
    mask_file: str | None = None,
    mask_row: int | None = None,
) -> dict:
    mask_ref = f"{mask_file}#{mask_row}" if mask_file is not None else None
    return {
        "id": sample_id,
        "label": label,
        "origin": origin,
        "feature_ref": f"{feature_file}#{row}",
        "mask_ref": mask_ref,
    }
