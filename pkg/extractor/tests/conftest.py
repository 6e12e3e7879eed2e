import numpy as np
import pytest
from PIL import Image


def toy_image(rng, size=64, defect=False):
    """Low-contrast textured background, optionally with a bright square."""
    base = rng.integers(90, 110, size=(size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    if defect:
        top = int(rng.integers(8, size - 24))
        left = int(rng.integers(8, size - 24))
        base[top : top + 16, left : left + 16] = 250
        mask[top : top + 16, left : left + 16] = 255
    return base, mask


@pytest.fixture(scope="session")
def toy_class_dir(tmp_path_factory):
    """MVTecAD-style tree: 8 train good, 3 test good, 3 test scratch."""
    root = tmp_path_factory.mktemp("toyset") / "widget"
    rng = np.random.default_rng(0)
    train = root / "train" / "good"
    train.mkdir(parents=True)
    for i in range(8):
        img, _ = toy_image(rng)
        Image.fromarray(img).save(train / f"{i:03d}.png")
    good = root / "test" / "good"
    good.mkdir(parents=True)
    for i in range(3):
        img, _ = toy_image(rng)
        Image.fromarray(img).save(good / f"{i:03d}.png")
    scratch = root / "test" / "scratch"
    gt = root / "ground_truth" / "scratch"
    scratch.mkdir(parents=True)
    gt.mkdir(parents=True)
    for i in range(3):
        img, mask = toy_image(rng, defect=True)
        Image.fromarray(img).save(scratch / f"{i:03d}.png")
        Image.fromarray(mask).save(gt / f"{i:03d}_mask.png")
    return root
