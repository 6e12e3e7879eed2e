"""Extractor configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

# ImageNet statistics used by the pretrained backbone.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ExtractorConfig:
    """Backbone, preprocessing, and overlap-augmentation parameters.

    Defaults follow the usual industrial-inspection setup: a wide 50-layer
    residual network, mid-level stages 2 and 3 aggregated with 3x3 local
    average pooling and channel concatenation after bilinear alignment,
    256 -> 224 center-crop preprocessing. BTAD-style datasets use
    resize = crop = 512.
    """

    backbone: str = "wide_resnet50_2"
    layers: tuple[int, ...] = (2, 3)
    resize: int = 256
    crop: int = 224
    normalization_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalization_std: tuple[float, float, float] = IMAGENET_STD
    pool_kernel: int = 3
    pretrained: bool = True
    seed: int = 0  # weight init when pretrained=False; recorded either way
    rotation_degrees: tuple[float, float] = (-3.0, 3.0)
    translate_fraction: tuple[float, float] = (-0.03, 0.03)

    def __post_init__(self):
        if self.backbone != "wide_resnet50_2":
            raise ValueError(f"unsupported backbone {self.backbone!r}")
        if not self.layers or any(layer not in (1, 2, 3, 4) for layer in self.layers):
            raise ValueError("layers must be a non-empty subset of stages 1-4")
        if self.crop > self.resize:
            raise ValueError("crop size cannot exceed resize size")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError("pool_kernel must be odd and >= 1")


BTAD_CONFIG = ExtractorConfig(resize=512, crop=512)
