"""MVTecAD-style directory layout walker.

Expected tree for one object class::

    <class_dir>/train/good/*.png
    <class_dir>/test/<good|defect...>/*.png
    <class_dir>/ground_truth/<defect>/<stem>_mask.png

File order is sorted everywhere so extraction is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class ImageEntry:
    sample_id: str          # e.g. "test/broken_large/000"
    path: Path
    label: str              # "normal" | "anomalous"
    mask_path: Path | None  # pixel ground truth, when it exists


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def walk_class_dir(class_dir: str | Path) -> tuple[list[ImageEntry], list[ImageEntry]]:
    """Train and test image entries for one object class."""
    root = Path(class_dir)
    train_dir = root / "train" / "good"
    if not train_dir.is_dir():
        raise FileNotFoundError(f"{root}: no train/good directory")
    train = [
        ImageEntry(f"train/good/{p.stem}", p, "normal", None)
        for p in _images_in(train_dir)
    ]
    test_dir = root / "test"
    if not test_dir.is_dir():
        raise FileNotFoundError(f"{root}: no test directory")
    test = []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        defect = defect_dir.name
        label = "normal" if defect == "good" else "anomalous"
        for path in _images_in(defect_dir):
            mask_path = None
            if label == "anomalous":
                candidate = root / "ground_truth" / defect / f"{path.stem}_mask.png"
                if candidate.is_file():
                    mask_path = candidate
            test.append(ImageEntry(f"test/{defect}/{path.stem}", path, label, mask_path))
    if not train or not test:
        raise FileNotFoundError(f"{root}: empty train or test split")
    return train, test


def load_image(path: Path, resize: int, crop: int) -> np.ndarray:
    """Load, resize (bilinear), and center-crop to (crop, crop, 3) uint8."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((resize, resize), Image.BILINEAR)
    return center_crop(np.asarray(rgb), crop)


def load_mask(path: Path, resize: int, crop: int) -> np.ndarray:
    """Ground-truth mask with the same geometry as the image (nearest)."""
    with Image.open(path) as img:
        gray = img.convert("L").resize((resize, resize), Image.NEAREST)
    return center_crop(np.asarray(gray), crop)


def center_crop(array: np.ndarray, crop: int) -> np.ndarray:
    h, w = array.shape[:2]
    if h < crop or w < crop:
        raise ValueError(f"image {h}x{w} smaller than crop {crop}")
    top = (h - crop) // 2
    left = (w - crop) // 2
    return array[top : top + crop, left : left + crop]
