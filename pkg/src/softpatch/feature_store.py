"""On-disk feature format, dataset manifests, and the synthetic generator.

Feature file format ("SPF1")
----------------------------
A feature file holds one dense float32 tensor of patch features with shape
``(N, h, w, c)``: N samples, an h-by-w grid of patch positions per sample,
c channels per patch. Layout:

=========  =======  ====================================================
offset     size     content
=========  =======  ====================================================
0          4        magic bytes ``b"SPF1"``
4          32       four unsigned 64-bit little-endian dims: N, h, w, c
36         4*N*h*w*c  raw little-endian IEEE float32, C order (N, h, w, c)
=========  =======  ====================================================

No compression, no padding, no trailing bytes. All payload values must be
finite; the loader rejects NaN/Inf with the flat index of the first
offender. Patch masks reuse the same container with ``c = 1`` and values
in {0, 1}.

Manifest JSON (schema_version 1)
--------------------------------
A manifest lists the samples of one split and where their features live::

    {
      "schema_version": 1,
      "name": "synthetic",
      "split": "train" | "test",
      "noise_ratio": 0.0,
      "overlap_mode": "none" | "no_overlap" | "overlap",
      "seed": 0,
      "records": [
        {"id": "train-0000",
         "label": "normal" | "anomalous",
         "origin": "train_clean" | "injected_noise" | "test",
         "feature_ref": "train.spf1#0",
         "mask_ref": null | "masks.spf1#3"}
      ]
    }

``feature_ref``/``mask_ref`` are ``"<relative path>#<row index>"`` pointers
into SPF1 files, relative to the manifest's own directory. Unknown keys are
rejected; schema errors carry a JSON pointer to the offending field.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    ConfigError,
    DuplicateId,
    GenerationError,
    MalformedHeader,
    NonFiniteValue,
    SchemaError,
    TruncatedPayload,
)
from .rng import SplitMix64

SPF1_MAGIC = b"SPF1"
SPF1_HEADER_LEN = 36

MANIFEST_SCHEMA_VERSION = 1

LABELS = ("normal", "anomalous")
ORIGINS = ("train_clean", "injected_noise", "test")
SPLITS = ("train", "test")
OVERLAP_MODES = ("none", "no_overlap", "overlap")

# Conventional file names used by the synthetic generator and the CLI.
TRAIN_FEATURES_NAME = "train.spf1"
TEST_FEATURES_NAME = "test.spf1"
MASKS_NAME = "masks.spf1"
TRAIN_MANIFEST_NAME = "train.json"
TEST_MANIFEST_NAME = "test.json"

# Cluster means are drawn with std MEAN_SPREAD * cluster_sigma so the whole
# synthetic construction scales linearly with cluster_sigma.
MEAN_SPREAD = 10.0


@dataclass(frozen=True)
class FeatureTensor:
    """Dense (N, h, w, c) float32 patch-feature array for one split."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if arr.ndim != 4:
            raise ConfigError(f"feature tensor must be 4-d, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ConfigError(f"all tensor dims must be >= 1, got {arr.shape}")
        finite = np.isfinite(arr.ravel())
        if not finite.all():
            raise NonFiniteValue(int(np.flatnonzero(~finite)[0]))
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def write_feature_file(tensor: FeatureTensor, path: str | Path) -> None:
    """Write ``tensor`` to ``path`` in the SPF1 format (bit-exact)."""
    n, h, w, c = tensor.data.shape
    header = SPF1_MAGIC + struct.pack("<4Q", n, h, w, c)
    payload = tensor.data.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_feature_file(path: str | Path) -> FeatureTensor:
    """Read an SPF1 file, validating header, length, and finiteness."""
    data = Path(path).read_bytes()
    if len(data) < SPF1_HEADER_LEN or data[:4] != SPF1_MAGIC:
        raise MalformedHeader(f"{path}: not an SPF1 file")
    dims = struct.unpack("<4Q", data[4:SPF1_HEADER_LEN])
    if min(dims) < 1:
        raise MalformedHeader(f"{path}: zero dimension in header {dims}")
    expected = 4 * math.prod(dims)
    got = len(data) - SPF1_HEADER_LEN
    if got < expected:
        raise TruncatedPayload(f"{path}: payload {got} bytes, header claims {expected}")
    if got > expected:
        raise MalformedHeader(f"{path}: {got - expected} trailing bytes")
    arr = np.frombuffer(data, dtype="<f4", offset=SPF1_HEADER_LEN).reshape(dims)
    return FeatureTensor(arr)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: str
    feature_ref: str
    origin: str
    mask_ref: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    noise_ratio: float
    overlap_mode: str
    seed: int
    records: tuple[SampleRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        validate_manifest(self)

    def record_ids(self) -> list[str]:
        return [r.id for r in self.records]

    def labels(self) -> np.ndarray:
        """0/1 label vector (1 = anomalous), record order."""
        return np.array([1 if r.label == "anomalous" else 0 for r in self.records])


def validate_manifest(manifest: DatasetManifest) -> None:
    if manifest.split not in SPLITS:
        raise SchemaError(f"invalid split {manifest.split!r}", "/split")
    if manifest.overlap_mode not in OVERLAP_MODES:
        raise SchemaError(f"invalid overlap_mode {manifest.overlap_mode!r}", "/overlap_mode")
    if not 0.0 <= manifest.noise_ratio <= 1.0:
        raise SchemaError(f"noise_ratio {manifest.noise_ratio} outside [0, 1]", "/noise_ratio")
    seen: set[str] = set()
    for i, rec in enumerate(manifest.records):
        ptr = f"/records/{i}"
        if rec.id in seen:
            raise DuplicateId(f"duplicate sample id {rec.id!r} at {ptr}/id")
        seen.add(rec.id)
        if rec.label not in LABELS:
            raise SchemaError(f"invalid label {rec.label!r}", f"{ptr}/label")
        if rec.origin not in ORIGINS:
            raise SchemaError(f"invalid origin {rec.origin!r}", f"{ptr}/origin")
        if rec.label == "normal" and rec.mask_ref is not None:
            raise SchemaError("normal sample must not carry a mask", f"{ptr}/mask_ref")
        parse_ref(rec.feature_ref, f"{ptr}/feature_ref")
        if rec.mask_ref is not None:
            parse_ref(rec.mask_ref, f"{ptr}/mask_ref")
    if manifest.split == "train":
        n = len(manifest.records)
        injected = sum(1 for r in manifest.records if r.origin == "injected_noise")
        actual = injected / n if n else 0.0
        tol = 1.0 / n if n else 0.0
        if abs(manifest.noise_ratio - actual) > tol + 1e-12:
            raise SchemaError(
                f"noise_ratio {manifest.noise_ratio} inconsistent with "
                f"{injected}/{n} injected records",
                "/noise_ratio",
            )


def parse_ref(ref: str, pointer: str = "/ref") -> tuple[str, int]:
    """Split a ``"path#index"`` reference, validating both parts."""
    if not isinstance(ref, str) or "#" not in ref:
        raise SchemaError(f"ref {ref!r} is not of the form 'path#index'", pointer)
    path, _, idx = ref.rpartition("#")
    if not path or not idx.isdigit():
        raise SchemaError(f"ref {ref!r} is not of the form 'path#index'", pointer)
    return path, int(idx)


_MANIFEST_KEYS = {
    "schema_version", "name", "split", "noise_ratio", "overlap_mode", "seed", "records",
}
_RECORD_KEYS = {"id", "label", "feature_ref", "origin", "mask_ref"}


def _expect(obj, key, types, pointer):
    if key not in obj:
        raise SchemaError(f"missing required field {key!r}", f"{pointer}/{key}")
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool) and types is not bool:
        raise SchemaError(f"field {key!r} has wrong type {type(value).__name__}", f"{pointer}/{key}")
    return value


def manifest_to_json_dict(manifest: DatasetManifest) -> dict:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "name": manifest.name,
        "split": manifest.split,
        "noise_ratio": manifest.noise_ratio,
        "overlap_mode": manifest.overlap_mode,
        "seed": manifest.seed,
        "records": [
            {
                "id": r.id,
                "label": r.label,
                "feature_ref": r.feature_ref,
                "origin": r.origin,
                "mask_ref": r.mask_ref,
            }
            for r in manifest.records
        ],
    }


def manifest_from_json_dict(doc: dict) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise SchemaError("manifest document must be a JSON object", "")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise SchemaError("unknown field", f"/{sorted(unknown)[0]}")
    version = _expect(doc, "schema_version", int, "")
    if version != MANIFEST_SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}", "/schema_version")
    records = []
    raw_records = _expect(doc, "records", list, "")
    for i, raw in enumerate(raw_records):
        ptr = f"/records/{i}"
        if not isinstance(raw, dict):
            raise SchemaError("record must be a JSON object", ptr)
        unknown = set(raw) - _RECORD_KEYS
        if unknown:
            raise SchemaError("unknown field", f"{ptr}/{sorted(unknown)[0]}")
        mask_ref = raw.get("mask_ref")
        if mask_ref is not None and not isinstance(mask_ref, str):
            raise SchemaError("mask_ref must be a string or null", f"{ptr}/mask_ref")
        records.append(
            SampleRecord(
                id=_expect(raw, "id", str, ptr),
                label=_expect(raw, "label", str, ptr),
                feature_ref=_expect(raw, "feature_ref", str, ptr),
                origin=_expect(raw, "origin", str, ptr),
                mask_ref=mask_ref,
            )
        )
    return DatasetManifest(
        name=_expect(doc, "name", str, ""),
        split=_expect(doc, "split", str, ""),
        noise_ratio=float(_expect(doc, "noise_ratio", (int, float), "")),
        overlap_mode=_expect(doc, "overlap_mode", str, ""),
        seed=_expect(doc, "seed", int, ""),
        records=tuple(records),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = manifest_to_json_dict(manifest)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}", "") from exc
    return manifest_from_json_dict(doc)


# ---------------------------------------------------------------------------
# Resolving refs to tensors
# ---------------------------------------------------------------------------


def load_referenced_tensors(manifest: DatasetManifest, base_dir: str | Path) -> dict[str, FeatureTensor]:
    """Load every SPF1 file referenced by ``manifest``, keyed by ref path."""
    base = Path(base_dir)
    tensors: dict[str, FeatureTensor] = {}
    for rec in manifest.records:
        for ref in (rec.feature_ref, rec.mask_ref):
            if ref is None:
                continue
            path, _ = parse_ref(ref)
            if path not in tensors:
                tensors[path] = read_feature_file(base / path)
    return tensors


def gather_features(manifest: DatasetManifest, tensors: Mapping[str, FeatureTensor]) -> FeatureTensor:
    """Assemble the manifest's samples into one tensor, record order."""
    rows = []
    shape = None
    for i, rec in enumerate(manifest.records):
        path, idx = parse_ref(rec.feature_ref)
        tensor = tensors.get(path)
        if tensor is None:
            raise ConfigError(f"record {rec.id}: no tensor loaded for {path!r}")
        if idx >= tensor.n_samples:
            raise SchemaError(f"row {idx} out of range for {path!r}", f"/records/{i}/feature_ref")
        if shape is None:
            shape = tensor.data.shape[1:]
        elif tensor.data.shape[1:] != shape:
            raise ConfigError(f"grid/channel mismatch between referenced files: "
                              f"{tensor.data.shape[1:]} vs {shape}")
        rows.append(tensor.data[idx])
    if not rows:
        raise ConfigError("manifest has no records to gather")
    return FeatureTensor(np.stack(rows))


def gather_masks(
    manifest: DatasetManifest,
    tensors: Mapping[str, FeatureTensor],
    grid: tuple[int, int],
) -> np.ndarray:
    """Per-record (N, h, w) ground-truth patch masks; zeros where absent."""
    h, w = grid
    out = np.zeros((len(manifest.records), h, w), dtype=np.float32)
    for i, rec in enumerate(manifest.records):
        if rec.mask_ref is None:
            continue
        path, idx = parse_ref(rec.mask_ref)
        tensor = tensors.get(path)
        if tensor is None:
            raise ConfigError(f"record {rec.id}: no tensor loaded for {path!r}")
        grid_arr = tensor.data[idx]
        if grid_arr.shape != (h, w, 1):
            raise ConfigError(f"mask grid {grid_arr.shape} does not match features {(h, w, 1)}")
        out[i] = grid_arr[..., 0]
    return out


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the cluster-plus-shift synthetic feature generator.

    ``anomaly_offset`` is the shift magnitude in units of
    ``cluster_sigma * sqrt(channels)``, so separability is independent of
    the channel count. Offsets of at least 4 give a separable construction
    (self-checked at generation time).
    """

    n_normal: int
    n_anomalous: int
    grid: tuple[int, int]
    channels: int
    cluster_sigma: float = 1.0
    anomaly_offset: float = 10.0
    anomaly_patch_fraction: float = 0.25
    clusters_per_position: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        checks = [
            (self.n_normal >= 1, "n_normal must be >= 1"),
            (self.n_anomalous >= 1, "n_anomalous must be >= 1"),
            (len(self.grid) == 2 and min(self.grid) >= 1, "grid must be a pair of counts >= 1"),
            (self.channels >= 1, "channels must be >= 1"),
            (self.cluster_sigma > 0, "cluster_sigma must be > 0"),
            (self.anomaly_offset > 0, "anomaly_offset must be > 0"),
            (0 < self.anomaly_patch_fraction <= 1, "anomaly_patch_fraction must be in (0, 1]"),
            (self.clusters_per_position >= 1, "clusters_per_position must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass(frozen=True)
class SyntheticDataset:
    """In-memory result of the generator, plus a ref resolver for eval."""

    train: FeatureTensor
    test: FeatureTensor
    train_manifest: DatasetManifest
    test_manifest: DatasetManifest
    masks: FeatureTensor  # (n_anomalous, h, w, 1), rows follow anomalous record order
    cluster_means: np.ndarray  # (h*w, clusters_per_position, c)

    @property
    def tensors(self) -> dict[str, FeatureTensor]:
        """Resolver mapping ref paths to tensors, mirroring the on-disk names."""
        return {
            TRAIN_FEATURES_NAME: self.train,
            TEST_FEATURES_NAME: self.test,
            MASKS_NAME: self.masks,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _draw_sample(rng: SplitMix64, means: np.ndarray, sigma: float) -> np.ndarray:
    """One sample's (P, c) patch matrix: cluster choice then noise per position.

    Draw order (pinned): P uniforms for cluster indices (floor(u * K)),
    then P*c normals for the noise, positions row-major.
    """
    n_pos, k, c = means.shape
    choice = np.minimum((rng.uniforms(n_pos) * k).astype(np.int64), k - 1)
    noise = rng.normals(n_pos * c).reshape(n_pos, c)
    return means[np.arange(n_pos), choice] + sigma * noise


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate a deterministic synthetic train/test dataset.

    Construction, all draws from one splitmix64 stream seeded by
    ``spec.seed`` in this exact order:

    1. Cluster means: ``P * K * c`` normals scaled by
       ``MEAN_SPREAD * cluster_sigma`` (positions row-major, clusters inner).
    2. ``n_normal`` train samples, each via ``_draw_sample``.
    3. ``n_anomalous`` fresh normal test samples (the test split is
       balanced: one normal per anomalous sample).
    4. ``n_anomalous`` anomalous test samples: a normal draw, then a
       shuffle-based choice of ``max(1, round(fraction * P))`` positions,
       then per shifted position (ascending) ``c`` normals normalised to a
       unit direction; the patch moves by
       ``anomaly_offset * cluster_sigma * sqrt(c)`` along it.

    When ``anomaly_offset >= 4`` the generator verifies its separability
    contract (min shifted-to-unshifted distance at any position exceeds
    ``2 * cluster_sigma * sqrt(c)``) and raises ``GenerationError``
    otherwise.
    """
    h, w = spec.grid
    n_pos = h * w
    c = spec.channels
    sigma = spec.cluster_sigma
    rng = SplitMix64(spec.seed)

    means = (
        rng.normals(n_pos * spec.clusters_per_position * c)
        .reshape(n_pos, spec.clusters_per_position, c)
        * (MEAN_SPREAD * sigma)
    )

    train = np.stack([_draw_sample(rng, means, sigma) for _ in range(spec.n_normal)])
    test_normal = np.stack([_draw_sample(rng, means, sigma) for _ in range(spec.n_anomalous)])

    n_shift = min(n_pos, max(1, _round_half_up(spec.anomaly_patch_fraction * n_pos)))
    shift_len = spec.anomaly_offset * sigma * math.sqrt(c)
    test_anom = np.empty((spec.n_anomalous, n_pos, c))
    masks = np.zeros((spec.n_anomalous, n_pos), dtype=np.float32)
    for a in range(spec.n_anomalous):
        sample = _draw_sample(rng, means, sigma)
        positions = sorted(rng.sample_indices(n_pos, n_shift))
        for p in positions:
            direction = rng.normals(c)
            norm = float(np.linalg.norm(direction))
            if norm < 1e-12:
                direction = np.zeros(c)
                direction[0] = 1.0
                norm = 1.0
            sample[p] += (shift_len / norm) * direction
            masks[a, p] = 1.0
        test_anom[a] = sample

    if spec.anomaly_offset >= 4.0:
        _separability_check(train, test_normal, test_anom, masks, sigma, c)

    train_tensor = FeatureTensor(train.reshape(spec.n_normal, h, w, c))
    test_tensor = FeatureTensor(
        np.concatenate([test_normal, test_anom]).reshape(2 * spec.n_anomalous, h, w, c)
    )
    mask_tensor = FeatureTensor(masks.reshape(spec.n_anomalous, h, w, 1))

    train_records = tuple(
        SampleRecord(
            id=f"train-{i:04d}",
            label="normal",
            feature_ref=f"{TRAIN_FEATURES_NAME}#{i}",
            origin="train_clean",
        )
        for i in range(spec.n_normal)
    )
    test_records = tuple(
        SampleRecord(
            id=f"test-normal-{i:04d}",
            label="normal",
            feature_ref=f"{TEST_FEATURES_NAME}#{i}",
            origin="test",
        )
        for i in range(spec.n_anomalous)
    ) + tuple(
        SampleRecord(
            id=f"test-anom-{i:04d}",
            label="anomalous",
            feature_ref=f"{TEST_FEATURES_NAME}#{spec.n_anomalous + i}",
            origin="test",
            mask_ref=f"{MASKS_NAME}#{i}",
        )
        for i in range(spec.n_anomalous)
    )
    train_manifest = DatasetManifest(
        name="synthetic", split="train", noise_ratio=0.0,
        overlap_mode="none", seed=spec.seed, records=train_records,
    )
    test_manifest = DatasetManifest(
        name="synthetic", split="test", noise_ratio=0.0,
        overlap_mode="none", seed=spec.seed, records=test_records,
    )
    return SyntheticDataset(
        train_tensor, test_tensor, train_manifest, test_manifest, mask_tensor, means
    )


def _separability_check(train, test_normal, test_anom, masks, sigma, c):
    threshold = 2.0 * sigma * math.sqrt(c)
    n_pos = train.shape[1]
    for p in range(n_pos):
        shifted = test_anom[masks[:, p] > 0, p]
        if shifted.size == 0:
            continue
        unshifted = np.concatenate(
            [train[:, p], test_normal[:, p], test_anom[masks[:, p] == 0, p]]
        )
        min_dist = cdist(shifted, unshifted).min()
        if min_dist <= threshold:
            raise GenerationError(
                f"separability self-check failed at position {p}: "
                f"min inter-class distance {min_dist:.4g} <= {threshold:.4g}"
            )


def generate_synthetic_dataset(
    spec: SyntheticSpec,
) -> tuple[FeatureTensor, FeatureTensor, DatasetManifest, DatasetManifest]:
    """Tensors and manifests only; see ``generate_synthetic`` for masks too."""
    ds = generate_synthetic(spec)
    return ds.train, ds.test, ds.train_manifest, ds.test_manifest


def save_synthetic_dataset(ds: SyntheticDataset, out_dir: str | Path) -> list[Path]:
    """Write the dataset's tensors and manifests into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, tensor in (
        (TRAIN_FEATURES_NAME, ds.train),
        (TEST_FEATURES_NAME, ds.test),
        (MASKS_NAME, ds.masks),
    ):
        write_feature_file(tensor, out / name)
        written.append(out / name)
    save_manifest(ds.train_manifest, out / TRAIN_MANIFEST_NAME)
    save_manifest(ds.test_manifest, out / TEST_MANIFEST_NAME)
    written += [out / TRAIN_MANIFEST_NAME, out / TEST_MANIFEST_NAME]
    return written


__all__ = [
    "FeatureTensor",
    "SampleRecord",
    "DatasetManifest",
    "SyntheticSpec",
    "SyntheticDataset",
    "write_feature_file",
    "read_feature_file",
    "save_manifest",
    "load_manifest",
    "manifest_to_json_dict",
    "manifest_from_json_dict",
    "parse_ref",
    "load_referenced_tensors",
    "gather_features",
    "gather_masks",
    "generate_synthetic",
    "generate_synthetic_dataset",
    "save_synthetic_dataset",
]
