"""Scoring test samples against a memory bank.

Each test patch is matched to its exact nearest bank entry (projected first
when the bank stores a projection) and scored as the entry's soft weight
times the Euclidean distance. A sample's image-level score is the maximum
over its patch grid. Patch grids can be upsampled to pixel resolution with
corner-aligned bilinear interpolation plus optional Gaussian smoothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist

from .coreset import MemoryBank
from .errors import ConfigError, DimensionMismatch, EmptyBank
from .feature_store import FeatureTensor, write_feature_file

DEFAULT_SMOOTHING_SIGMA = 4.0


@dataclass(frozen=True)
class ScoreReport:
    """Per-image scores, per-patch grids, and match provenance."""

    sample_ids: tuple[str, ...]
    image_scores: np.ndarray          # (N,) float64
    per_patch: np.ndarray             # (N, h, w) float64
    nearest_entry: np.ndarray         # (N, h, w) int64 bank entry indices
    bank_config: dict

    def per_image(self) -> list[tuple[str, float]]:
        return [(sid, float(s)) for sid, s in zip(self.sample_ids, self.image_scores)]


def _project_queries(bank: MemoryBank, queries: np.ndarray) -> np.ndarray:
    queries = queries.astype(np.float64)
    if bank.projection is None:
        if queries.shape[1] != bank.dim:
            raise DimensionMismatch(
                f"query dim {queries.shape[1]} vs bank dim {bank.dim}"
            )
        return queries
    if queries.shape[1] != bank.projection.shape[0]:
        raise DimensionMismatch(
            f"query dim {queries.shape[1]} vs projection input {bank.projection.shape[0]}"
        )
    return (queries @ bank.projection).astype(np.float32).astype(np.float64)


def query_nearest(bank: MemoryBank, patch: np.ndarray) -> tuple[int, float]:
    """Exact nearest bank entry for one patch; ties pick the lowest index."""
    if len(bank) == 0:
        raise EmptyBank("cannot query an empty bank")
    patch = np.asarray(patch, dtype=np.float64).reshape(1, -1)
    q = _project_queries(bank, patch)
    dist = cdist(q, bank.entries.astype(np.float64))[0]
    idx = int(np.argmin(dist))
    return idx, float(dist[idx])


def score_patches(bank: MemoryBank, test_features: FeatureTensor, sample_ids=None) -> ScoreReport:
    """Soft-weighted nearest-neighbor score for every test patch."""
    n, h, w, c = test_features.data.shape
    queries = _project_queries(bank, test_features.data.reshape(-1, c))
    dist = cdist(queries, bank.entries.astype(np.float64))
    nearest = dist.argmin(axis=1)
    scores = bank.soft_weights[nearest] * dist[np.arange(len(nearest)), nearest]
    per_patch = scores.reshape(n, h, w)
    if sample_ids is None:
        sample_ids = tuple(str(i) for i in range(n))
    return ScoreReport(
        sample_ids=tuple(sample_ids),
        image_scores=per_patch.reshape(n, -1).max(axis=1),
        per_patch=per_patch,
        nearest_entry=nearest.reshape(n, h, w).astype(np.int64),
        bank_config=bank.config,
    )


def image_score(per_patch_grid: np.ndarray) -> float:
    """Image-level anomaly score: the maximum patch score."""
    grid = np.asarray(per_patch_grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("image score of an empty grid is undefined")
    return float(grid.max())


def _bilinear_upsample(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-d grid to ``target``."""
    h, w = grid.shape
    out_h, out_w = target
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def anomaly_map(
    per_patch_grid: np.ndarray,
    target: tuple[int, int],
    smoothing_sigma: float = DEFAULT_SMOOTHING_SIGMA,
) -> np.ndarray:
    """Upsample a patch grid to pixel resolution and optionally smooth it.

    ``smoothing_sigma`` is in upsampled pixels; 0 disables smoothing.
    """
    grid = np.asarray(per_patch_grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ConfigError(f"patch grid must be 2-d, got shape {grid.shape}")
    if target[0] < grid.shape[0] or target[1] < grid.shape[1]:
        raise ConfigError(f"target {target} smaller than grid {grid.shape}")
    if smoothing_sigma < 0:
        raise ConfigError("smoothing_sigma must be >= 0")
    out = _bilinear_upsample(grid, target)
    if smoothing_sigma > 0:
        out = gaussian_filter(out, sigma=smoothing_sigma, mode="reflect")
    return out


def save_score_report(
    report: ScoreReport,
    out_dir: str | Path,
    stem: str = "report",
    grid_report: ScoreReport | None = None,
) -> list[Path]:
    """Emit the JSON report and the SPF1 per-patch grids.

    In the dual-bank variant ``report`` supplies the image scores (the
    classification bank) while ``grid_report`` supplies the patch grids
    (the segmentation bank); both bank configs land in the JSON.
    """
    grid_report = grid_report or report
    if grid_report.sample_ids != report.sample_ids:
        raise ConfigError("image and grid reports cover different samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grids_name = f"{stem}_patch_scores.spf1"
    n, h, w = grid_report.per_patch.shape
    write_feature_file(
        FeatureTensor(grid_report.per_patch.reshape(n, h, w, 1).astype(np.float32)),
        out / grids_name,
    )
    doc = {
        "schema_version": 1,
        "image_bank_config": report.bank_config,
        "grid_bank_config": grid_report.bank_config,
        "patch_scores_ref": grids_name,
        "per_image": [
            {"id": sid, "image_score": float(score)}
            for sid, score in zip(report.sample_ids, report.image_scores)
        ],
    }
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return [json_path, out / grids_name]


__all__ = [
    "ScoreReport",
    "query_nearest",
    "score_patches",
    "image_score",
    "anomaly_map",
    "save_score_report",
    "DEFAULT_SMOOTHING_SIGMA",
]
