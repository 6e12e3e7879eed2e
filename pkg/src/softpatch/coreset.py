"""Noisy-patch filtering, projection, greedy subsampling, and the memory bank.

The bank-building pipeline: score every training patch with the configured
discriminators, drop the top tau fraction globally, optionally project the
survivors to a lower dimension, pick a minimax-distance greedy coreset, and
keep the selected patches together with their outlier scores as soft
weights (normalized to mean 1).

Memory-bank file format ("SPMB", version 1)
-------------------------------------------
Little-endian throughout; u64 = unsigned 64-bit, f32/f64 = IEEE floats.

1. magic ``b"SPMB"`` (4 bytes), version u8 = 1
2. config blob: u64 byte length, then canonical UTF-8 JSON (sorted keys,
   no whitespace)
3. projection: u64 in_dim, u64 out_dim (both 0 when absent), then
   in_dim*out_dim f64 row-major
4. entries: u64 count, u64 dim, then count*dim f32 row-major
5. soft weights: count f64
6. provenance, per entry: u64 id length, UTF-8 id, u64 h, u64 w

No trailing bytes. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .discriminators import DiscriminatorConfig, NoiseScoreMap, combined_scores
from .errors import (
    ConfigError,
    MalformedHeader,
    TruncatedPayload,
    UnsupportedVersion,
)
from .feature_store import FeatureTensor
from .rng import SplitMix64

SPMB_MAGIC = b"SPMB"
SPMB_VERSION = 1


@dataclass(frozen=True)
class CoresetConfig:
    """Filtering threshold, sampling ratio, optional projection, and seed."""

    tau: float = 0.15
    sampling_ratio: float = 0.10
    projection_dim: int | None = None
    seed: int = 0
    weight_normalization: str = "divide_by_mean"

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("tau must lie in [0, 1)")
        if not 0.0 < self.sampling_ratio <= 1.0:
            raise ConfigError("sampling_ratio must lie in (0, 1]")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ConfigError("projection_dim must be >= 1")
        if self.weight_normalization != "divide_by_mean":
            raise ConfigError(f"unsupported weight_normalization {self.weight_normalization!r}")

    def to_json_dict(self) -> dict:
        return {
            "tau": self.tau,
            "sampling_ratio": self.sampling_ratio,
            "projection_dim": self.projection_dim,
            "seed": self.seed,
            "weight_normalization": self.weight_normalization,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CoresetConfig":
        return cls(
            tau=doc.get("tau", 0.15),
            sampling_ratio=doc.get("sampling_ratio", 0.10),
            projection_dim=doc.get("projection_dim"),
            seed=doc.get("seed", 0),
            weight_normalization=doc.get("weight_normalization", "divide_by_mean"),
        )


@dataclass(frozen=True)
class PatchSet:
    """Flat patch matrix plus the provenance of every row.

    ``provenance`` columns are (sample index, h, w); ``sample_ids`` maps
    sample indices back to manifest ids.
    """

    vectors: np.ndarray        # (M, c) float32
    scores: np.ndarray         # (M,) float64, the scores that drove filtering
    provenance: np.ndarray     # (M, 3) int64
    sample_ids: tuple[str, ...]


def flatten_patches(
    features: FeatureTensor,
    scores: NoiseScoreMap,
    sample_ids: Sequence[str] | None = None,
) -> PatchSet:
    """All patches of a tensor as rows, sample-major then row-major grid."""
    n, h, w, c = features.data.shape
    if scores.scores.shape != (n, h, w):
        raise ConfigError(
            f"score map shape {scores.scores.shape} does not match features {(n, h, w)}"
        )
    if sample_ids is None:
        sample_ids = tuple(str(i) for i in range(n))
    elif len(sample_ids) != n:
        raise ConfigError("sample_ids length does not match sample count")
    idx = np.indices((n, h, w)).reshape(3, -1).T
    return PatchSet(
        vectors=features.data.reshape(-1, c),
        scores=scores.scores.reshape(-1).copy(),
        provenance=idx.astype(np.int64),
        sample_ids=tuple(sample_ids),
    )


def removal_order(scores: np.ndarray, provenance: np.ndarray) -> np.ndarray:
    """Indices sorted by (score desc, sample asc, h asc, w asc)."""
    return np.lexsort(
        (provenance[:, 2], provenance[:, 1], provenance[:, 0], -scores)
    )


def filter_patches(patches: PatchSet, tau: float) -> tuple[PatchSet, PatchSet]:
    """Split into (retained, removed): the removed set is exactly the
    ``floor(tau * M)`` highest-scoring patches under the deterministic
    tie order."""
    if not 0.0 <= tau < 1.0:
        raise ConfigError("tau must lie in [0, 1)")
    m = len(patches.scores)
    n_remove = int(math.floor(tau * m))
    order = removal_order(patches.scores, patches.provenance)
    removed_idx = np.sort(order[:n_remove])
    keep_mask = np.ones(m, dtype=bool)
    keep_mask[removed_idx] = False

    def subset(mask):
        return PatchSet(
            vectors=patches.vectors[mask],
            scores=patches.scores[mask],
            provenance=patches.provenance[mask],
            sample_ids=patches.sample_ids,
        )

    return subset(keep_mask), subset(~keep_mask)


def make_projection(channels: int, projection_dim: int, seed: int) -> np.ndarray:
    """Seeded Gaussian projection matrix (channels, projection_dim) with
    entries N(0, 1/projection_dim), so norms are preserved in expectation."""
    if projection_dim > channels:
        raise ConfigError(f"projection_dim {projection_dim} exceeds channels {channels}")
    rng = SplitMix64(seed)
    flat = rng.normals(channels * projection_dim) / math.sqrt(projection_dim)
    return flat.reshape(channels, projection_dim)


def project_features(
    vectors: np.ndarray, projection_dim: int | None, seed: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply a fresh seeded projection; identity when dim is None."""
    if projection_dim is None:
        return vectors, None
    matrix = make_projection(vectors.shape[1], projection_dim, seed)
    return (vectors.astype(np.float64) @ matrix).astype(np.float32), matrix


def greedy_coreset(vectors: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Minimax-distance (k-center) greedy selection of ceil(ratio * M) rows.

    Starts from a seeded uniformly random row, then repeatedly takes the
    row farthest from the selected set, maintaining a running min-distance
    array (O(M) per pick). Distance ties resolve to the lowest index.
    """
    m = len(vectors)
    if m == 0:
        raise ConfigError("cannot subsample an empty patch set")
    if not 0.0 < ratio <= 1.0:
        raise ConfigError("ratio must lie in (0, 1]")
    n_select = min(m, int(math.ceil(ratio * m)))
    data = vectors.astype(np.float64)
    start = SplitMix64(seed).randint(m)
    selected = np.empty(n_select, dtype=np.int64)
    selected[0] = start
    min_dist = np.linalg.norm(data - data[start], axis=1)
    for i in range(1, n_select):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        np.minimum(min_dist, np.linalg.norm(data - data[nxt], axis=1), out=min_dist)
    return selected


def coverage_radius(vectors: np.ndarray, selected: np.ndarray) -> float:
    """Max over all rows of the distance to the nearest selected row."""
    data = vectors.astype(np.float64)
    best = np.full(len(data), np.inf)
    for idx in selected:
        np.minimum(best, np.linalg.norm(data - data[idx], axis=1), out=best)
    return float(best.max())


@dataclass(frozen=True)
class MemoryBank:
    """Retained coreset patches, their soft weights, and provenance."""

    entries: np.ndarray                # (M, d) float32
    soft_weights: np.ndarray           # (M,) float64, mean 1 after normalization
    provenance: tuple[tuple[str, int, int], ...]  # (sample id, h, w) per entry
    projection: np.ndarray | None      # (c, d) float64 or None
    config: dict                       # JSON-compatible build snapshot

    def __post_init__(self):
        if len(self.soft_weights) != len(self.entries) or len(self.provenance) != len(self.entries):
            raise ConfigError("entries, weights, and provenance must align")
        if len(self.entries) == 0:
            raise ConfigError("memory bank cannot be empty")
        if not np.isfinite(self.soft_weights).all() or (self.soft_weights <= 0).any():
            raise ConfigError("soft weights must be finite and > 0")

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __len__(self) -> int:
        return len(self.entries)


def build_memory_bank(
    features: FeatureTensor,
    cfg: CoresetConfig,
    discriminator_cfg: DiscriminatorConfig,
    sample_ids: Sequence[str] | None = None,
    score_map: NoiseScoreMap | None = None,
) -> MemoryBank:
    """Run the full denoise-filter-subsample pipeline on a training tensor.

    ``score_map`` short-circuits the discriminator stage (used to share one
    fused map between the dual classification/segmentation banks).
    """
    if score_map is None:
        score_map = combined_scores(features, discriminator_cfg)
    patches = flatten_patches(features, score_map, sample_ids)
    retained, _ = filter_patches(patches, cfg.tau)
    projected, matrix = project_features(retained.vectors, cfg.projection_dim, cfg.seed)
    selected = greedy_coreset(projected, cfg.sampling_ratio, cfg.seed)

    weights = retained.scores[selected]
    mean = weights.mean()
    if mean <= 0.0:
        # All-zero scores (e.g. nearest-neighbor on duplicate samples):
        # every patch is equally trustworthy.
        weights = np.ones_like(weights)
    else:
        weights = np.maximum(weights / mean, 1e-12)
    provenance = tuple(
        (retained.sample_ids[s], int(h), int(w)) for s, h, w in retained.provenance[selected]
    )
    return MemoryBank(
        entries=projected[selected],
        soft_weights=weights,
        provenance=provenance,
        projection=matrix,
        config={
            "coreset": cfg.to_json_dict(),
            "discriminator": discriminator_cfg.to_json_dict(),
            "score_kind": score_map.kind,
        },
    )


def build_dual_banks(
    features: FeatureTensor,
    discriminator_cfg: DiscriminatorConfig,
    cls_cfg: CoresetConfig,
    seg_cfg: CoresetConfig,
    sample_ids: Sequence[str] | None = None,
) -> tuple[MemoryBank, MemoryBank]:
    """Classification and segmentation banks from one shared score map."""
    score_map = combined_scores(features, discriminator_cfg)
    return (
        build_memory_bank(features, cls_cfg, discriminator_cfg, sample_ids, score_map),
        build_memory_bank(features, seg_cfg, discriminator_cfg, sample_ids, score_map),
    )


# ---------------------------------------------------------------------------
# SPMB serialization
# ---------------------------------------------------------------------------


def save_memory_bank(bank: MemoryBank, path: str | Path) -> None:
    config_blob = json.dumps(bank.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [SPMB_MAGIC, struct.pack("<B", SPMB_VERSION)]
    parts.append(struct.pack("<Q", len(config_blob)))
    parts.append(config_blob)
    if bank.projection is None:
        parts.append(struct.pack("<QQ", 0, 0))
    else:
        rows, cols = bank.projection.shape
        parts.append(struct.pack("<QQ", rows, cols))
        parts.append(bank.projection.astype("<f8", copy=False).tobytes(order="C"))
    count, dim = bank.entries.shape
    parts.append(struct.pack("<QQ", count, dim))
    parts.append(bank.entries.astype("<f4", copy=False).tobytes(order="C"))
    parts.append(bank.soft_weights.astype("<f8", copy=False).tobytes(order="C"))
    for sample_id, h, w in bank.provenance:
        encoded = sample_id.encode("utf-8")
        parts.append(struct.pack("<Q", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<QQ", h, w))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayload(f"{self.path}: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_memory_bank(path: str | Path) -> MemoryBank:
    reader = _Reader(Path(path).read_bytes(), path)
    if len(reader.data) < 5 or reader.take(4) != SPMB_MAGIC:
        raise MalformedHeader(f"{path}: not an SPMB file")
    version = reader.take(1)[0]
    if version != SPMB_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}, expected {SPMB_VERSION}")
    config = json.loads(reader.take(reader.u64()).decode("utf-8"))
    rows, cols = reader.u64(), reader.u64()
    projection = None
    if rows or cols:
        projection = np.frombuffer(reader.take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
    count, dim = reader.u64(), reader.u64()
    entries = np.frombuffer(reader.take(4 * count * dim), dtype="<f4").reshape(count, dim)
    weights = np.frombuffer(reader.take(8 * count), dtype="<f8")
    provenance = []
    for _ in range(count):
        sample_id = reader.take(reader.u64()).decode("utf-8")
        provenance.append((sample_id, reader.u64(), reader.u64()))
    if reader.pos != len(reader.data):
        raise MalformedHeader(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return MemoryBank(
        entries=entries,
        soft_weights=weights,
        provenance=tuple(provenance),
        projection=projection,
        config=config,
    )


__all__ = [
    "CoresetConfig",
    "PatchSet",
    "MemoryBank",
    "flatten_patches",
    "removal_order",
    "filter_patches",
    "make_projection",
    "project_features",
    "greedy_coreset",
    "coverage_radius",
    "build_memory_bank",
    "build_dual_banks",
    "save_memory_bank",
    "load_memory_bank",
]
