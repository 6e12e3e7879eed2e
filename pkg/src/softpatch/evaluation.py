"""Noisy-split construction, AUROC metrics, and robustness sweeps.

The noisy-training protocol moves seeded random anomalous samples from the
test split into the training split. The injected count k solves
``k = ratio * (n_clean + k)`` (the ratio is defined over the final training
set while the normal count stays fixed), rounded half-up. In ``no_overlap``
mode the injected samples leave the test split; in ``overlap`` mode they
stay in it.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .coreset import CoresetConfig, build_dual_banks, build_memory_bank
from .discriminators import DiscriminatorConfig
from .errors import ConfigError, InfeasibleRatio, SoftPatchError, UndefinedMetric
from .feature_store import (
    DatasetManifest,
    FeatureTensor,
    SyntheticDataset,
    gather_features,
    gather_masks,
    load_manifest,
    load_referenced_tensors,
)
from .rng import SplitMix64
from .scoring import score_patches

CSV_COLUMNS = ("method", "ratio", "seed", "image_auroc", "patch_auroc", "runtime_ms")


@dataclass(frozen=True)
class NoiseInjectionSpec:
    ratio: float
    mode: str = "no_overlap"
    seed: int = 0
    augmentation_hook: bool = False  # recorded for provenance; runs extractor-side

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError("noise ratio must lie in [0, 1)")
        if self.mode not in ("no_overlap", "overlap"):
            raise ConfigError(f"unknown noise mode {self.mode!r}")


def injected_count(n_clean: int, ratio: float) -> int:
    """Solve k = ratio * (n_clean + k), rounded half-up."""
    if ratio == 0.0:
        return 0
    return int(math.floor(ratio * n_clean / (1.0 - ratio) + 0.5))


def build_noisy_split(
    clean_train: DatasetManifest,
    test: DatasetManifest,
    spec: NoiseInjectionSpec,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Inject anomalous test samples into the training manifest.

    Selection is a seeded shuffle of the anomalous test records; injected
    records keep their label and mask but get origin ``injected_noise``.
    ``no_overlap`` requires at least one anomalous record left in the test
    split so metrics stay defined.
    """
    pool = [r for r in test.records if r.label == "anomalous"]
    k = injected_count(len(clean_train.records), spec.ratio)
    if k == 0:
        return clean_train, test
    if not pool:
        raise InfeasibleRatio("test split has no anomalous samples to inject")
    limit = len(pool) if spec.mode == "overlap" else len(pool) - 1
    if k > limit:
        raise InfeasibleRatio(
            f"ratio {spec.ratio} needs {k} anomalous samples, "
            f"only {limit} available in {spec.mode} mode"
        )
    rng = SplitMix64(spec.seed)
    chosen = sorted(rng.sample_indices(len(pool), k))
    injected = tuple(replace(pool[i], origin="injected_noise") for i in chosen)
    injected_ids = {r.id for r in injected}

    train_records = clean_train.records + injected
    train_prime = DatasetManifest(
        name=clean_train.name,
        split="train",
        noise_ratio=spec.ratio,
        overlap_mode=spec.mode,
        seed=spec.seed,
        records=train_records,
    )
    if spec.mode == "overlap":
        test_records = test.records
    else:
        test_records = tuple(r for r in test.records if r.id not in injected_ids)
    test_prime = DatasetManifest(
        name=test.name,
        split="test",
        noise_ratio=test.noise_ratio,
        overlap_mode=spec.mode,
        seed=spec.seed,
        records=test_records,
    )
    return train_prime, test_prime


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact Mann-Whitney AUROC: concordant pairs plus half the ties,
    over n_pos * n_neg."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise ConfigError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def patch_auroc(per_patch: np.ndarray, masks: np.ndarray) -> float:
    """Patch-level AUROC over every grid cell of the whole test set."""
    per_patch = np.asarray(per_patch, dtype=np.float64)
    masks = np.asarray(masks)
    if per_patch.shape != masks.shape:
        raise ConfigError(f"grids {per_patch.shape} and masks {masks.shape} disagree")
    return auroc(per_patch.ravel(), (masks.ravel() > 0.5).astype(int))


# ---------------------------------------------------------------------------
# Methods and sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodConfig:
    """One named scoring pipeline: discriminator choice plus coreset knobs.

    ``tau_seg`` switches on the dual-bank variant: the ``tau`` bank scores
    images, the ``tau_seg`` bank produces the patch grids.
    """

    name: str
    selectors: tuple[int, int, int]
    tau: float
    tau_seg: float | None = None
    lof_k: int = 6
    epsilon: float = 0.01
    sampling_ratio: float = 0.10
    projection_dim: int | None = None

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            lof_k=self.lof_k, epsilon=self.epsilon, selectors=self.selectors
        )

    def coreset_config(self, tau: float, seed: int) -> CoresetConfig:
        return CoresetConfig(
            tau=tau,
            sampling_ratio=self.sampling_ratio,
            projection_dim=self.projection_dim,
            seed=seed,
        )


METHOD_PRESETS = {
    "baseline": dict(selectors=(0, 0, 0), tau=0.0),
    "softpatch-nearest": dict(selectors=(1, 0, 0), tau=0.15),
    "softpatch-gaussian": dict(selectors=(0, 1, 0), tau=0.15),
    "softpatch-lof": dict(selectors=(0, 0, 1), tau=0.15),
    "softpatch-plus": dict(selectors=(0, 1, 1), tau=0.15, tau_seg=0.50),
}


def method_preset(name: str, **overrides) -> MethodConfig:
    if name not in METHOD_PRESETS:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(METHOD_PRESETS)}")
    params = dict(METHOD_PRESETS[name])
    params.update(overrides)
    return MethodConfig(name=name, **params)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    ratio: float
    seed: int
    image_auroc: float | None
    patch_auroc: float | None
    runtime_ms: float
    error: str | None = None


@dataclass(frozen=True)
class EvalDataset:
    """Clean train/test manifests plus the tensors their refs resolve to."""

    train_manifest: DatasetManifest
    test_manifest: DatasetManifest
    tensors: dict[str, FeatureTensor]

    @classmethod
    def from_synthetic(cls, ds: SyntheticDataset) -> "EvalDataset":
        return cls(ds.train_manifest, ds.test_manifest, ds.tensors)

    @classmethod
    def from_files(cls, train_manifest_path, test_manifest_path) -> "EvalDataset":
        train_manifest = load_manifest(train_manifest_path)
        test_manifest = load_manifest(test_manifest_path)
        tensors = load_referenced_tensors(train_manifest, Path(train_manifest_path).parent)
        tensors.update(load_referenced_tensors(test_manifest, Path(test_manifest_path).parent))
        return cls(train_manifest, test_manifest, tensors)


def run_cell(
    dataset: EvalDataset,
    method: MethodConfig,
    ratio: float,
    seed: int,
    mode: str = "overlap",
) -> MetricsRow:
    """One sweep cell: split, fit bank(s), score, both AUROCs."""
    start = time.perf_counter()
    try:
        spec = NoiseInjectionSpec(ratio=ratio, mode=mode, seed=seed)
        train_prime, test_prime = build_noisy_split(
            dataset.train_manifest, dataset.test_manifest, spec
        )
        train_features = gather_features(train_prime, dataset.tensors)
        test_features = gather_features(test_prime, dataset.tensors)
        disc_cfg = method.discriminator_config()
        cls_cfg = method.coreset_config(method.tau, seed)
        ids = train_prime.record_ids()
        if method.tau_seg is None:
            cls_bank = build_memory_bank(train_features, cls_cfg, disc_cfg, ids)
            seg_bank = cls_bank
        else:
            seg_cfg = method.coreset_config(method.tau_seg, seed)
            cls_bank, seg_bank = build_dual_banks(
                train_features, disc_cfg, cls_cfg, seg_cfg, ids
            )
        cls_report = score_patches(cls_bank, test_features, test_prime.record_ids())
        if seg_bank is cls_bank:
            seg_report = cls_report
        else:
            seg_report = score_patches(seg_bank, test_features, test_prime.record_ids())
        image = auroc(cls_report.image_scores, test_prime.labels())
        masks = gather_masks(test_prime, dataset.tensors, test_features.grid)
        patch = patch_auroc(seg_report.per_patch, masks)
        runtime = (time.perf_counter() - start) * 1000.0
        return MetricsRow(method.name, ratio, seed, image, patch, runtime)
    except SoftPatchError as exc:
        runtime = (time.perf_counter() - start) * 1000.0
        return MetricsRow(method.name, ratio, seed, None, None, runtime, type(exc).__name__)


def sweep(
    dataset: EvalDataset,
    methods: Sequence[MethodConfig],
    ratios: Sequence[float],
    seeds: Sequence[int],
    mode: str = "overlap",
    threads: int = 1,
) -> list[MetricsRow]:
    """Every (method, ratio, seed) cell, rows in that nesting order.

    Cells are independent; ``threads > 1`` runs them on a pool while
    keeping the output order fixed. Failed cells come back with an error
    tag instead of metrics.
    """
    cells = [(m, r, s) for m in methods for r in ratios for s in seeds]
    if threads <= 1:
        return [run_cell(dataset, m, r, s, mode) for m, r, s in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_cell, dataset, m, r, s, mode) for m, r, s in cells]
        return [f.result() for f in futures]


def rows_to_csv(rows: Sequence[MetricsRow]) -> str:
    """Fixed-column CSV; on failed cells the AUROC columns carry the error
    tag so the failure stays visible in the grid."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        if row.error is None:
            image = f"{row.image_auroc:.6f}"
            patch = f"{row.patch_auroc:.6f}"
        else:
            image = patch = f"error:{row.error}"
        writer.writerow(
            [row.method, f"{row.ratio:g}", row.seed, image, patch, f"{row.runtime_ms:.3f}"]
        )
    return buf.getvalue()


__all__ = [
    "NoiseInjectionSpec",
    "MetricsRow",
    "MethodConfig",
    "EvalDataset",
    "METHOD_PRESETS",
    "method_preset",
    "injected_count",
    "build_noisy_split",
    "auroc",
    "patch_auroc",
    "run_cell",
    "sweep",
    "rows_to_csv",
    "CSV_COLUMNS",
]
