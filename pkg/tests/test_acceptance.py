"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -s`` to see them
all). Tolerances and budgets are fixed here, not calibrated elsewhere."""

import time

import numpy as np

from softpatch.cli import main as cli_main
from softpatch.coreset import (
    CoresetConfig,
    build_memory_bank,
    coverage_radius,
    filter_patches,
    flatten_patches,
    greedy_coreset,
)
from softpatch.discriminators import (
    DiscriminatorConfig,
    NoiseScoreMap,
    gaussian_scores,
    lof_scores,
)
from softpatch.evaluation import (
    EvalDataset,
    MethodConfig,
    NoiseInjectionSpec,
    auroc,
    build_noisy_split,
    method_preset,
    run_cell,
)
from softpatch.feature_store import (
    FeatureTensor,
    SyntheticSpec,
    gather_features,
    gather_masks,
    generate_synthetic,
)

from test_discriminators import lof_brute, mahalanobis_dense_inverse
from test_evaluation import auroc_pair_oracle


def report(number: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"{status} criterion {number}: {name}{suffix}")
    assert ok, f"criterion {number}: {name}{suffix}"


def as_tensor(points: np.ndarray) -> FeatureTensor:
    return FeatureTensor(points.astype(np.float32).reshape(len(points), 1, 1, -1))


def test_criterion_1_lof_oracle_equivalence():
    cfg = DiscriminatorConfig(lof_k=6)
    worst = 0.0
    library_time = 0.0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        points = rng.normal(size=(200, 8)).astype(np.float32)
        tensor = as_tensor(points)
        start = time.perf_counter()
        lib = lof_scores(tensor, cfg).scores.ravel()
        library_time += time.perf_counter() - start
        ref = lof_brute(points.astype(np.float64), 6)
        worst = max(worst, float(np.max(np.abs(lib - ref) / np.abs(ref))))
    report(
        1, "LOF oracle equivalence",
        worst <= 1e-6 and library_time < 1.0,
        f"max rel err {worst:.2e}, library time {library_time * 1000:.0f} ms",
    )


def test_criterion_2_gaussian_oracle_equivalence():
    cfg = DiscriminatorConfig(epsilon=0.01)
    worst = 0.0
    library_time = 0.0
    rng = np.random.default_rng(2024)
    for _ in range(50):
        n = int(rng.integers(10, 101))
        c = int(rng.integers(2, 17))
        points = rng.normal(size=(n, c)).astype(np.float32)
        tensor = as_tensor(points)
        start = time.perf_counter()
        lib = gaussian_scores(tensor, cfg).scores.ravel()
        library_time += time.perf_counter() - start
        ref = mahalanobis_dense_inverse(points.astype(np.float64), 0.01)
        scale = max(ref.max(), 1e-30)
        worst = max(worst, float(np.max(np.abs(lib - ref)) / scale))
    report(
        2, "Gaussian oracle equivalence",
        worst <= 1e-9 and library_time < 1.0,
        f"max rel err {worst:.2e}, library time {library_time * 1000:.0f} ms",
    )


def _noisy_training_set(spec: SyntheticSpec, ratio: float, seed: int):
    ds = generate_synthetic(spec)
    split_spec = NoiseInjectionSpec(ratio=ratio, mode="overlap", seed=seed)
    train_prime, _ = build_noisy_split(ds.train_manifest, ds.test_manifest, split_spec)
    features = gather_features(train_prime, ds.tensors)
    masks = gather_masks(train_prime, ds.tensors, features.grid)
    return train_prime, features, masks


def test_criterion_3_denoising_efficacy():
    start = time.perf_counter()
    total_anomalous = 0
    total_leaked = 0
    for seed in range(5):
        spec = SyntheticSpec(
            n_normal=100, n_anomalous=30, grid=(4, 4), channels=8,
            anomaly_offset=10.0, anomaly_patch_fraction=0.3, seed=300 + seed,
        )
        train_prime, features, masks = _noisy_training_set(spec, ratio=0.10, seed=seed)
        bank = build_memory_bank(
            features,
            CoresetConfig(tau=0.15, sampling_ratio=0.10, seed=seed),
            DiscriminatorConfig(selectors=(0, 0, 1)),
            sample_ids=train_prime.record_ids(),
        )
        ids = train_prime.record_ids()
        anomalous = {
            (ids[i], int(y), int(x)) for i, y, x in zip(*np.nonzero(masks > 0))
        }
        total_anomalous += len(anomalous)
        total_leaked += len(anomalous & set(bank.provenance))
    elapsed = time.perf_counter() - start
    removed_rate = 1.0 - total_leaked / total_anomalous
    report(
        3, "denoising efficacy",
        removed_rate >= 0.99 and elapsed < 10.0,
        f"{removed_rate * 100:.2f}% of {total_anomalous} anomalous patches "
        f"kept out of the bank, {elapsed:.1f} s",
    )


def _trend_dataset(seed: int) -> EvalDataset:
    return EvalDataset.from_synthetic(
        generate_synthetic(
            SyntheticSpec(
                n_normal=100, n_anomalous=70, grid=(4, 4), channels=8,
                anomaly_offset=10.0, anomaly_patch_fraction=0.25, seed=seed,
            )
        )
    )


def test_criterion_4_robustness_trend():
    start = time.perf_counter()
    ratios = (0.10, 0.20, 0.30, 0.40)
    seeds = range(5)
    dataset = _trend_dataset(400)
    methods = {
        "baseline": method_preset("baseline"),
        "lof": method_preset("softpatch-lof"),
        "plus": method_preset("softpatch-plus"),
    }
    curves = {name: {r: [] for r in ratios} for name in methods}
    lof_always_above = True
    for ratio in ratios:
        for seed in seeds:
            cells = {
                name: run_cell(dataset, method, ratio, seed, mode="overlap")
                for name, method in methods.items()
            }
            for name, row in cells.items():
                assert row.error is None, f"{name} failed: {row.error}"
                curves[name][ratio].append(row.image_auroc)
            if cells["lof"].image_auroc <= cells["baseline"].image_auroc:
                lof_always_above = False
    mean = {
        name: {r: float(np.mean(v)) for r, v in per_ratio.items()}
        for name, per_ratio in curves.items()
    }
    plus_drop = mean["plus"][0.10] - mean["plus"][0.40]
    base_drop = mean["baseline"][0.10] - mean["baseline"][0.40]
    elapsed = time.perf_counter() - start
    report(
        4, "robustness trend",
        lof_always_above and plus_drop <= 0.05 and base_drop >= 0.20 and elapsed < 120.0,
        f"lof>baseline everywhere={lof_always_above}, fused drop {plus_drop:.3f}, "
        f"baseline drop {base_drop:.3f}, {elapsed:.1f} s",
    )


def test_criterion_5_lof_k_plateau():
    start = time.perf_counter()
    dataset = _trend_dataset(500)
    means = []
    for k in (5, 6, 7, 8, 9):
        method = method_preset("softpatch-lof", lof_k=k)
        values = [
            run_cell(dataset, method, 0.10, seed, mode="overlap").image_auroc
            for seed in range(3)
        ]
        means.append(float(np.mean(values)))
    spread = max(means) - min(means)
    elapsed = time.perf_counter() - start
    report(
        5, "LOF-K plateau",
        spread <= 0.02 and elapsed < 120.0,
        f"spread {spread:.4f} over K=5..9, {elapsed:.1f} s",
    )


def test_criterion_6_auroc_exactness():
    examples_ok = (
        auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
        and auroc([3.0] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
        and auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    )
    rng = np.random.default_rng(600)
    random_ok = True
    checked = 0
    while checked < 100:
        n = int(rng.integers(4, 60))
        scores = rng.integers(0, 8, size=n).astype(float)  # ties included
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        checked += 1
        if auroc(scores, labels) != auroc_pair_oracle(scores, labels):
            random_ok = False
            break
    report(
        6, "AUROC exactness",
        examples_ok and random_ok,
        f"3 worked examples plus {checked} randomized cases, exact equality",
    )


def test_criterion_7_fit_determinism(tmp_path):
    import json

    spec = {
        "n_normal": 40, "n_anomalous": 12, "grid": [3, 3], "channels": 6,
        "seed": 77, "anomaly_patch_fraction": 0.3,
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert cli_main(["synth", "--spec", str(tmp_path / "spec.json"),
                     "--out-dir", str(tmp_path / "data")]) == 0
    config = {"schema_version": 1, "method": "softpatch-plus", "coreset": {"seed": 5}}
    (tmp_path / "cfg.json").write_text(json.dumps(config))
    digests = []
    for run in ("one", "two"):
        out = tmp_path / run / "bank.spmb"
        out.parent.mkdir()
        assert cli_main(["fit", "--config", str(tmp_path / "cfg.json"),
                         "--manifest", str(tmp_path / "data" / "train.json"),
                         "--out", str(out)]) == 0
        digests.append(
            (out.with_name("bank-cls.spmb").read_bytes(),
             out.with_name("bank-seg.spmb").read_bytes())
        )
    report(
        7, "fit determinism",
        digests[0] == digests[1],
        "two cmd_fit runs, byte-identical cls and seg banks",
    )


def test_criterion_8_filter_and_coreset_oracles():
    rng = np.random.default_rng(800)
    filter_ok = True
    for trial in range(100):
        n, h, w = int(rng.integers(2, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        scores = np.round(rng.uniform(size=(n, h, w)), 1)
        features = FeatureTensor(rng.normal(size=(n, h, w, 3)).astype(np.float32))
        score_map = NoiseScoreMap(scores, "nn", DiscriminatorConfig())
        patches = flatten_patches(features, score_map)
        _, removed = filter_patches(patches, 0.15)
        # full-sort oracle with the documented tie order
        items = sorted(
            (-scores[i, y, x], i, y, x)
            for i in range(n) for y in range(h) for x in range(w)
        )
        expected = {(i, y, x) for _, i, y, x in items[: int(np.floor(0.15 * n * h * w))]}
        got = {tuple(p) for p in removed.provenance.tolist()}
        if got != expected:
            filter_ok = False
            break

    wins = 0
    trials = 20
    for trial in range(trials):
        trial_rng = np.random.default_rng(900 + trial)
        cloud = trial_rng.normal(size=(300, 8)).astype(np.float32)
        greedy_sel = greedy_coreset(cloud, 0.1, seed=trial)
        random_sel = trial_rng.choice(len(cloud), size=len(greedy_sel), replace=False)
        if coverage_radius(cloud, greedy_sel) <= coverage_radius(cloud, random_sel):
            wins += 1
    report(
        8, "filter and coreset oracles",
        filter_ok and wins >= int(0.95 * trials),
        f"filter matched 100 sort oracles, greedy won {wins}/{trials} coverage trials",
    )
