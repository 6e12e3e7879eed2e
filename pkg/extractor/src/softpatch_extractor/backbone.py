"""Patch-feature embedding with a pretrained residual backbone.

Selected stage outputs are locally averaged (3x3, stride 1), bilinearly
aligned to the largest selected grid, and concatenated along channels, so
each grid cell carries a mid-level descriptor of its receptive field.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.models import Wide_ResNet50_2_Weights, wide_resnet50_2
from torchvision.models.feature_extraction import create_feature_extractor

from .config import ExtractorConfig


class FeatureEmbedder:
    def __init__(self, config: ExtractorConfig):
        self.config = config
        if config.pretrained:
            weights = Wide_ResNet50_2_Weights.IMAGENET1K_V1
        else:
            weights = None
            torch.manual_seed(config.seed)
        model = wide_resnet50_2(weights=weights).eval()
        nodes = {f"layer{stage}": f"layer{stage}" for stage in config.layers}
        self._extractor = create_feature_extractor(model, nodes).eval()
        self._mean = torch.tensor(config.normalization_mean).view(1, 3, 1, 1)
        self._std = torch.tensor(config.normalization_std).view(1, 3, 1, 1)

    def preprocess(self, images: np.ndarray) -> torch.Tensor:
        """(N, H, W, 3) uint8 RGB -> normalized float batch."""
        batch = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0
        return (batch - self._mean) / self._std

    @torch.no_grad()
    def embed(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """(N, H, W, 3) uint8 RGB -> (N, h, w, c) float32 patch features."""
        chunks = []
        for start in range(0, len(images), batch_size):
            batch = self.preprocess(images[start : start + batch_size])
            outputs = self._extractor(batch)
            maps = [outputs[f"layer{stage}"] for stage in self.config.layers]
            pad = self.config.pool_kernel // 2
            maps = [F.avg_pool2d(m, self.config.pool_kernel, stride=1, padding=pad)
                    for m in maps]
            target = max((m.shape[-2], m.shape[-1]) for m in maps)
            maps = [
                m if (m.shape[-2], m.shape[-1]) == target
                else F.interpolate(m, size=target, mode="bilinear", align_corners=False)
                for m in maps
            ]
            merged = torch.cat(maps, dim=1)           # (B, c, h, w)
            chunks.append(merged.permute(0, 2, 3, 1))  # (B, h, w, c)
        return torch.cat(chunks).numpy().astype(np.float32)

    def grid_shape(self, image_hw: tuple[int, int]) -> tuple[int, int]:
        """Output grid for a given input size (largest selected stage)."""
        probe = np.zeros((1, image_hw[0], image_hw[1], 3), dtype=np.uint8)
        return self.embed(probe).shape[1:3]


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Pixel mask -> patch-grid mask: a cell is anomalous if any of its
    pixels is."""
    tensor = torch.from_numpy((mask > 0).astype(np.float32))[None, None]
    pooled = F.adaptive_max_pool2d(tensor, grid)[0, 0]
    return pooled.numpy().astype(np.float32)
