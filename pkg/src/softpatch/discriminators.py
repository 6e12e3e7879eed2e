"""Per-patch outlier scoring across samples at each grid position.

Patches are grouped by grid position: the population behind every score at
``(h, w)`` is the N patches, one per sample, sharing that coordinate. Three
discriminators are provided, all exact (no approximate neighbor search):

* nearest: minimum Euclidean distance to any other sample's patch.
* gaussian: Mahalanobis distance to the position's shared Gaussian fit
  ``(mu, Sigma + eps*I)``; the scored patch is included in the fit.
* lof: local outlier factor with tie-inclusive k-neighbor sets (every
  point at exactly the k-th distance belongs to the neighborhood).

Scores can be rank-normalized within each position group (average ranks on
ties, divided by N, so values land in (0, 1]) and fused as a
selector-weighted mean for the multi-discriminator variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .errors import ConfigError, InsufficientSamples
from .feature_store import FeatureTensor

SCORE_KINDS = ("nn", "mvg", "lof", "rank_normalized", "fused")

# Stand-in local density for a patch whose k-neighborhood is all coincident
# with it (reachability sum 0). Keeps every score finite; such a patch's own
# score is pinned to 1.0 ("not an outlier").
DEGENERATE_LRD = 1e12


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Knobs for the discriminators and their fusion.

    ``selectors`` picks which discriminators vote, ordered
    (nearest, gaussian, lof). The default is the fused gaussian+lof
    variant. ``(0, 0, 0)`` is the documented no-denoise baseline: no
    scores are computed and every patch counts the same.
    """

    lof_k: int = 6
    epsilon: float = 0.01
    selectors: tuple[int, int, int] = (0, 1, 1)
    tie_rule: str = "average_rank"

    def __post_init__(self):
        object.__setattr__(self, "selectors", tuple(int(s) for s in self.selectors))
        if self.lof_k < 1:
            raise ConfigError("lof_k must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if len(self.selectors) != 3 or any(s not in (0, 1) for s in self.selectors):
            raise ConfigError("selectors must be three 0/1 flags (nn, mvg, lof)")
        if self.tie_rule != "average_rank":
            raise ConfigError(f"unsupported tie_rule {self.tie_rule!r}")

    def to_json_dict(self) -> dict:
        return {
            "lof_k": self.lof_k,
            "epsilon": self.epsilon,
            "selectors": list(self.selectors),
            "tie_rule": self.tie_rule,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DiscriminatorConfig":
        return cls(
            lof_k=doc.get("lof_k", 6),
            epsilon=doc.get("epsilon", 0.01),
            selectors=tuple(doc.get("selectors", (0, 1, 1))),
            tie_rule=doc.get("tie_rule", "average_rank"),
        )


@dataclass(frozen=True)
class NoiseScoreMap:
    """(N, h, w) outlier scores of one kind, with the config that made them."""

    scores: np.ndarray
    kind: str
    params: DiscriminatorConfig

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 3:
            raise ConfigError(f"score map must be (N, h, w), got {arr.shape}")
        if self.kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score kind {self.kind!r}")
        if not np.isfinite(arr).all():
            raise ConfigError(f"non-finite values in {self.kind} score map")
        if self.kind in ("nn", "mvg") and (arr < 0).any():
            raise ConfigError(f"negative values in {self.kind} score map")
        if self.kind == "lof" and (arr <= 0).any():
            raise ConfigError("lof scores must be > 0")
        if self.kind in ("rank_normalized", "fused") and ((arr <= 0) | (arr > 1)).any():
            raise ConfigError(f"{self.kind} scores must lie in (0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)


def _positions(features: FeatureTensor) -> np.ndarray:
    """View features as (h*w, N, c) float64 position groups."""
    n, h, w, c = features.data.shape
    return features.data.astype(np.float64).reshape(n, h * w, c).transpose(1, 0, 2)


def nearest_scores(features: FeatureTensor, cfg: DiscriminatorConfig | None = None) -> NoiseScoreMap:
    """Distance of each patch to its nearest same-position patch from
    another sample."""
    cfg = cfg or DiscriminatorConfig()
    n, h, w, _ = features.data.shape
    if n < 2:
        raise InsufficientSamples("nearest-neighbor scores need at least 2 samples")
    out = np.empty((h * w, n))
    for p, group in enumerate(_positions(features)):
        dist = cdist(group, group)
        np.fill_diagonal(dist, np.inf)
        out[p] = dist.min(axis=1)
    return NoiseScoreMap(out.T.reshape(n, h, w), "nn", cfg)


def gaussian_scores(features: FeatureTensor, cfg: DiscriminatorConfig | None = None) -> NoiseScoreMap:
    """Mahalanobis distance of each patch under its position's Gaussian fit.

    The fit uses all N patches of the position (the scored one included):
    sample covariance with an ``epsilon * I`` ridge, applied through a
    Cholesky factorization rather than an explicit inverse.
    """
    cfg = cfg or DiscriminatorConfig()
    n, h, w, c = features.data.shape
    if n < 2:
        raise InsufficientSamples("gaussian scores need at least 2 samples")
    out = np.empty((h * w, n))
    eye = cfg.epsilon * np.eye(c)
    for p, group in enumerate(_positions(features)):
        centered = group - group.mean(axis=0)
        cov = centered.T @ centered / (n - 1) + eye
        try:
            lower = cholesky(cov, lower=True)
        except np.linalg.LinAlgError as exc:  # unreachable for epsilon > 0
            raise ConfigError(f"covariance not SPD at position {p}: {exc}") from exc
        z = solve_triangular(lower, centered.T, lower=True)
        out[p] = np.sqrt(np.maximum((z * z).sum(axis=0), 0.0))
    return NoiseScoreMap(out.T.reshape(n, h, w), "mvg", cfg)


def _lof_group(dist: np.ndarray, k: int) -> np.ndarray:
    """LOF for one position group given its (N, N) distance matrix."""
    n = dist.shape[0]
    dist = dist.copy()
    np.fill_diagonal(dist, np.inf)
    kdist = np.sort(dist, axis=1)[:, k - 1]
    # Tie-inclusive neighborhoods: everything at distance <= k-distance.
    member = dist <= kdist[:, None]
    counts = member.sum(axis=1)
    reach = np.maximum(kdist[None, :], dist)
    reach_sum = np.where(member, reach, 0.0).sum(axis=1)
    degenerate = reach_sum == 0.0
    lrd = np.where(degenerate, DEGENERATE_LRD, counts / np.where(degenerate, 1.0, reach_sum))
    lof = np.where(member, lrd[None, :], 0.0).sum(axis=1) / (counts * lrd)
    return np.where(degenerate, 1.0, lof)


def lof_scores(features: FeatureTensor, cfg: DiscriminatorConfig | None = None) -> NoiseScoreMap:
    """Local outlier factor of each patch within its position group."""
    cfg = cfg or DiscriminatorConfig()
    n, h, w, _ = features.data.shape
    if n <= cfg.lof_k:
        raise InsufficientSamples(f"lof needs more than lof_k={cfg.lof_k} samples, got {n}")
    out = np.empty((h * w, n))
    for p, group in enumerate(_positions(features)):
        out[p] = _lof_group(cdist(group, group), cfg.lof_k)
    return NoiseScoreMap(out.T.reshape(n, h, w), "lof", cfg)


def rank_normalize(score_map: NoiseScoreMap) -> NoiseScoreMap:
    """Replace each score by its ascending rank within the position group,
    divided by the group size; ties get the average of their rank range."""
    if score_map.kind not in ("nn", "mvg", "lof"):
        raise ConfigError(f"cannot rank-normalize a {score_map.kind} map")
    n = score_map.scores.shape[0]
    ranks = rankdata(score_map.scores, method="average", axis=0)
    return NoiseScoreMap(ranks / n, "rank_normalized", score_map.params)


def fuse_scores(maps: list[NoiseScoreMap], cfg: DiscriminatorConfig) -> NoiseScoreMap:
    """Selector-weighted elementwise mean of rank-normalized maps.

    ``maps`` must be ordered (nearest, gaussian, lof) with ``None`` or a
    map at each slot; only slots with selector 1 participate.
    """
    if len(maps) != 3:
        raise ConfigError("fuse_scores expects one slot per discriminator (nn, mvg, lof)")
    picked = [m for m, s in zip(maps, cfg.selectors) if s]
    if not picked:
        raise ConfigError("fusion requested with no selected discriminator")
    shape = None
    total = None
    for m in picked:
        if m is None:
            raise ConfigError("selector set for a discriminator whose map is missing")
        if m.kind != "rank_normalized":
            raise ConfigError(f"fusion inputs must be rank_normalized, got {m.kind}")
        if shape is None:
            shape = m.scores.shape
            total = np.zeros(shape)
        elif m.scores.shape != shape:
            raise ConfigError(f"score map shape mismatch: {m.scores.shape} vs {shape}")
        total = total + m.scores
    return NoiseScoreMap(total / len(picked), "fused", cfg)


_SCORERS = (nearest_scores, gaussian_scores, lof_scores)


def combined_scores(features: FeatureTensor, cfg: DiscriminatorConfig) -> NoiseScoreMap:
    """The score map that drives filtering and soft weights for ``cfg``.

    One selector: that discriminator's raw map. Several: the rank-vote
    fusion. None: a uniform all-ones map (no-denoise baseline).
    """
    n_selected = sum(cfg.selectors)
    if n_selected == 0:
        n, h, w, _ = features.data.shape
        return NoiseScoreMap(np.ones((n, h, w)), "fused", cfg)
    if n_selected == 1:
        scorer = _SCORERS[cfg.selectors.index(1)]
        return scorer(features, cfg)
    maps = [
        rank_normalize(scorer(features, cfg)) if selected else None
        for scorer, selected in zip(_SCORERS, cfg.selectors)
    ]
    return fuse_scores(maps, cfg)


__all__ = [
    "DiscriminatorConfig",
    "NoiseScoreMap",
    "nearest_scores",
    "gaussian_scores",
    "lof_scores",
    "rank_normalize",
    "fuse_scores",
    "combined_scores",
    "DEGENERATE_LRD",
]
