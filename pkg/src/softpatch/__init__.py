"""Patch-level denoising and soft-weighted coreset memory banks for fully
unsupervised anomaly detection on patch-feature tensors."""

from .coreset import (
    CoresetConfig,
    MemoryBank,
    build_dual_banks,
    build_memory_bank,
    filter_patches,
    flatten_patches,
    greedy_coreset,
    load_memory_bank,
    project_features,
    save_memory_bank,
)
from .discriminators import (
    DiscriminatorConfig,
    NoiseScoreMap,
    combined_scores,
    fuse_scores,
    gaussian_scores,
    lof_scores,
    nearest_scores,
    rank_normalize,
)
from .evaluation import (
    EvalDataset,
    MethodConfig,
    MetricsRow,
    NoiseInjectionSpec,
    auroc,
    build_noisy_split,
    method_preset,
    patch_auroc,
    run_cell,
    sweep,
)
from .feature_store import (
    DatasetManifest,
    FeatureTensor,
    SampleRecord,
    SyntheticDataset,
    SyntheticSpec,
    generate_synthetic,
    generate_synthetic_dataset,
    load_manifest,
    read_feature_file,
    save_manifest,
    write_feature_file,
)
from .scoring import ScoreReport, anomaly_map, image_score, query_nearest, score_patches

__version__ = "0.1.0"
