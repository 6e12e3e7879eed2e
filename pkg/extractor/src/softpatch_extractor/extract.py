"""End-to-end extraction: image directory tree -> SPF1 tensors + manifests.

Outputs (into the target directory): ``train.spf1``, ``test.spf1``,
``masks.spf1`` (patch-resolution ground truth for anomalous test samples
that have pixel masks), and ``train.json``/``test.json`` manifests whose
refs point at those files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .backbone import FeatureEmbedder, downsample_mask
from .config import ExtractorConfig
from .dataset import ImageEntry, load_image, load_mask, walk_class_dir
from .spf import feature_record, write_manifest, write_spf1

TRAIN_FEATURES = "train.spf1"
TEST_FEATURES = "test.spf1"
MASKS = "masks.spf1"


def _load_batch(entries: list[ImageEntry], config: ExtractorConfig) -> np.ndarray:
    return np.stack(
        [load_image(entry.path, config.resize, config.crop) for entry in entries]
    )


def extract(class_dir: str | Path, out_dir: str | Path,
            config: ExtractorConfig | None = None) -> list[Path]:
    """Extract one object class; returns the written file paths."""
    config = config or ExtractorConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_entries, test_entries = walk_class_dir(class_dir)
    embedder = FeatureEmbedder(config)

    train_features = embedder.embed(_load_batch(train_entries, config))
    test_features = embedder.embed(_load_batch(test_entries, config))
    grid = train_features.shape[1:3]
    if test_features.shape[1:] != train_features.shape[1:]:
        raise ValueError(
            f"train/test grid mismatch: {train_features.shape[1:]} vs "
            f"{test_features.shape[1:]}"
        )

    masks = []
    mask_rows: dict[str, int] = {}
    for entry in test_entries:
        if entry.mask_path is None:
            continue
        pixel_mask = load_mask(entry.mask_path, config.resize, config.crop)
        mask_rows[entry.sample_id] = len(masks)
        masks.append(downsample_mask(pixel_mask, grid))

    name = Path(class_dir).name
    written = []
    write_spf1(train_features, out / TRAIN_FEATURES)
    written.append(out / TRAIN_FEATURES)
    write_spf1(test_features, out / TEST_FEATURES)
    written.append(out / TEST_FEATURES)
    if masks:
        write_spf1(np.stack(masks)[..., None], out / MASKS)
        written.append(out / MASKS)

    train_records = [
        feature_record(entry.sample_id, "normal", "train_clean", TRAIN_FEATURES, row)
        for row, entry in enumerate(train_entries)
    ]
    test_records = []
    for row, entry in enumerate(test_entries):
        mask_row = mask_rows.get(entry.sample_id)
        test_records.append(
            feature_record(
                entry.sample_id, entry.label, "test", TEST_FEATURES, row,
                mask_file=MASKS if mask_row is not None else None,
                mask_row=mask_row,
            )
        )
    write_manifest(out / "train.json", name, "train", train_records, seed=config.seed)
    write_manifest(out / "test.json", name, "test", test_records, seed=config.seed)
    written += [out / "train.json", out / "test.json"]
    return written
