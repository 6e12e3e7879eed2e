"""Seeded image augmentation for the overlap protocol.

Injected noisy images are re-used in the test split, so their training
copies get a mild random rotation and translation to mimic camera jitter.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np
import torchvision.transforms.functional as TF
from PIL import Image

from .config import ExtractorConfig


@dataclass(frozen=True)
class AugmentParams:
    angle: float        # degrees
    translate_x: int    # pixels
    translate_y: int    # pixels


def sample_params(config: ExtractorConfig, seed: int, count: int,
                  image_size: tuple[int, int]) -> list[AugmentParams]:
    """The random draws behind ``augment_for_overlap``, exposed so tests
    can verify the configured bounds directly."""
    rng = random.Random(seed)
    lo_deg, hi_deg = config.rotation_degrees
    lo_t, hi_t = config.translate_fraction
    width, height = image_size
    params = []
    for _ in range(count):
        angle = rng.uniform(lo_deg, hi_deg)
        tx = int(round(rng.uniform(lo_t, hi_t) * width))
        ty = int(round(rng.uniform(lo_t, hi_t) * height))
        params.append(AugmentParams(angle, tx, ty))
    return params


def augment_for_overlap(
    images: list[Image.Image], config: ExtractorConfig, seed: int
) -> list[Image.Image]:
    """Rotate and translate each image by seeded draws within the
    configured ranges. A zero-range config is the identity."""
    if not images:
        return []
    params = sample_params(config, seed, len(images), images[0].size)
    out = []
    for img, p in zip(images, params):
        if p.angle == 0.0 and p.translate_x == 0 and p.translate_y == 0:
            out.append(img.copy())
            continue
        out.append(
            TF.affine(
                img,
                angle=p.angle,
                translate=(p.translate_x, p.translate_y),
                scale=1.0,
                shear=[0.0, 0.0],
                interpolation=TF.InterpolationMode.BILINEAR,
            )
        )
    return out


def augment_arrays(images: np.ndarray, config: ExtractorConfig, seed: int) -> np.ndarray:
    """Array-batch convenience wrapper around ``augment_for_overlap``."""
    pil = [Image.fromarray(img) for img in images]
    return np.stack([np.asarray(img) for img in augment_for_overlap(pil, config, seed)])
