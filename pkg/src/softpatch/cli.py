"""Command-line surface binding the pipeline end to end.

Subcommands: synth, inject-noise, fit, score, eval, sweep. Exit codes:
0 ok, 1 I/O failure, 2 config error, 3 data error. ``--threads`` (or the
SOFTPATCH_THREADS environment variable) caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .coreset import (
    CoresetConfig,
    build_memory_bank,
    load_memory_bank,
    save_memory_bank,
)
from .discriminators import (
    DiscriminatorConfig,
    fuse_scores,
    gaussian_scores,
    lof_scores,
    nearest_scores,
    rank_normalize,
)
from .errors import ConfigError, DataError, SchemaError
from .evaluation import (
    EvalDataset,
    MethodConfig,
    NoiseInjectionSpec,
    build_noisy_split,
    method_preset,
    rows_to_csv,
    run_cell,
    sweep,
)
from .feature_store import (
    SyntheticSpec,
    gather_features,
    generate_synthetic,
    load_manifest,
    load_referenced_tensors,
    parse_ref,
    save_manifest,
    save_synthetic_dataset,
)
from .scoring import save_score_report, score_patches

RUN_CONFIG_VERSION = 1


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}", "") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be a JSON object", "")
    return doc


def _require(doc: dict, key: str, pointer: str = ""):
    if key not in doc:
        raise SchemaError(f"missing required field {key!r}", f"{pointer}/{key}")
    return doc[key]


def synthetic_spec_from_dict(doc: dict, pointer: str = "") -> SyntheticSpec:
    known = {
        "n_normal", "n_anomalous", "grid", "channels", "seed",
        "cluster_sigma", "anomaly_offset", "anomaly_patch_fraction",
        "clusters_per_position",
    }
    unknown = set(doc) - known
    if unknown:
        raise SchemaError("unknown field", f"{pointer}/{sorted(unknown)[0]}")
    grid = _require(doc, "grid", pointer)
    if not (isinstance(grid, list) and len(grid) == 2):
        raise SchemaError("grid must be a [h, w] pair", f"{pointer}/grid")
    kwargs = {
        "n_normal": _require(doc, "n_normal", pointer),
        "n_anomalous": _require(doc, "n_anomalous", pointer),
        "grid": tuple(grid),
        "channels": _require(doc, "channels", pointer),
        "seed": _require(doc, "seed", pointer),
    }
    for key in ("cluster_sigma", "anomaly_offset", "anomaly_patch_fraction",
                "clusters_per_position"):
        if key in doc:
            kwargs[key] = doc[key]
    return SyntheticSpec(**kwargs)


def load_run_config(path) -> dict:
    doc = _load_json(path)
    known = {"schema_version", "method", "discriminator", "coreset", "noise",
             "dataset", "synthetic", "sweep"}
    unknown = set(doc) - known
    if unknown:
        raise SchemaError("unknown field", f"/{sorted(unknown)[0]}")
    if _require(doc, "schema_version") != RUN_CONFIG_VERSION:
        raise SchemaError(f"unsupported schema_version {doc['schema_version']}",
                          "/schema_version")
    return doc


def method_from_config(cfg: dict) -> MethodConfig:
    """Resolve the method preset plus any discriminator/coreset overrides."""
    overrides = {}
    disc = cfg.get("discriminator", {})
    for key in ("lof_k", "epsilon"):
        if key in disc:
            overrides[key] = disc[key]
    if "selectors" in disc:
        overrides["selectors"] = tuple(disc["selectors"])
    core = cfg.get("coreset", {})
    for key in ("tau", "tau_seg", "sampling_ratio", "projection_dim"):
        if key in core:
            overrides[key] = core[key]
    name = cfg.get("method", "softpatch-plus")
    if "selectors" in overrides:
        base = dict(selectors=overrides.pop("selectors"),
                    tau=overrides.pop("tau", 0.15),
                    tau_seg=overrides.pop("tau_seg", None))
        base.update(overrides)
        return MethodConfig(name=name, **base)
    return method_preset(name, **overrides)


def dataset_from_config(cfg: dict, config_dir: Path) -> EvalDataset:
    if "synthetic" in cfg:
        spec = synthetic_spec_from_dict(cfg["synthetic"], "/synthetic")
        return EvalDataset.from_synthetic(generate_synthetic(spec))
    if "dataset" in cfg:
        section = cfg["dataset"]
        train = _require(section, "train_manifest", "/dataset")
        test = _require(section, "test_manifest", "/dataset")
        return EvalDataset.from_files(config_dir / train, config_dir / test)
    raise SchemaError("config needs a 'dataset' or 'synthetic' section", "/dataset")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SOFTPATCH_THREADS")
    return max(1, int(env)) if env else 1


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = synthetic_spec_from_dict(_load_json(args.spec))
    files = save_synthetic_dataset(generate_synthetic(spec), args.out_dir)
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_inject_noise(args) -> int:
    train = load_manifest(args.train)
    test = load_manifest(args.test)
    spec = NoiseInjectionSpec(ratio=args.ratio, mode=args.mode, seed=args.seed)
    train_prime, test_prime = build_noisy_split(train, test, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_prime = _rebase_manifest(train_prime, Path(args.train).parent, out)
    test_prime = _rebase_manifest(test_prime, Path(args.test).parent, out)
    save_manifest(train_prime, out / "train_noisy.json")
    save_manifest(test_prime, out / "test_noisy.json")
    injected = sum(1 for r in train_prime.records if r.origin == "injected_noise")
    print(f"injected {injected} noisy samples ({args.mode}); "
          f"wrote {out / 'train_noisy.json'} and {out / 'test_noisy.json'}")
    return 0


def _rebase_manifest(manifest, old_dir: Path, new_dir: Path):
    """Re-point refs so they stay valid from the new manifest directory."""
    from dataclasses import replace

    def rebase(ref):
        if ref is None:
            return None
        path, idx = parse_ref(ref)
        rel = os.path.relpath((old_dir / path).resolve(), new_dir.resolve())
        return f"{Path(rel).as_posix()}#{idx}"

    records = tuple(
        replace(r, feature_ref=rebase(r.feature_ref), mask_ref=rebase(r.mask_ref))
        for r in manifest.records
    )
    return replace(manifest, records=records)


def _timed_score_map(features, disc_cfg):
    """Score map for fit, timing each selected discriminator."""
    scorers = (("nearest", nearest_scores), ("gaussian", gaussian_scores),
               ("lof", lof_scores))
    picked = []
    for (name, scorer), selected in zip(scorers, disc_cfg.selectors):
        if not selected:
            picked.append(None)
            continue
        start = time.perf_counter()
        raw = scorer(features, disc_cfg)
        print(f"{name}: {(time.perf_counter() - start) * 1000.0:.1f} ms")
        picked.append(raw)
    live = [m for m in picked if m is not None]
    if not live:
        return None  # baseline: build_memory_bank synthesizes the uniform map
    if len(live) == 1:
        return live[0]
    return fuse_scores(
        [rank_normalize(m) if m is not None else None for m in picked], disc_cfg
    )


def cmd_fit(args) -> int:
    cfg = load_run_config(args.config)
    method = method_from_config(cfg)
    manifest = load_manifest(args.manifest)
    tensors = load_referenced_tensors(manifest, Path(args.manifest).parent)
    features = gather_features(manifest, tensors)
    ids = manifest.record_ids()
    seed = cfg.get("coreset", {}).get("seed", 0)
    disc_cfg = method.discriminator_config()
    score_map = _timed_score_map(features, disc_cfg)

    n, h, w, _ = features.data.shape
    out = Path(args.out)

    def fit_one(tau, path):
        core_cfg = method.coreset_config(tau, seed)
        bank = build_memory_bank(features, core_cfg, disc_cfg, ids, score_map)
        save_memory_bank(bank, path)
        removed = int(tau * n * h * w)
        print(f"removed {removed} of {n * h * w} patches (tau={tau}); "
              f"bank of {len(bank)} entries -> {path}")

    if method.tau_seg is None:
        fit_one(method.tau, out)
    else:
        cls_path = out.with_name(out.stem + "-cls" + out.suffix)
        seg_path = out.with_name(out.stem + "-seg" + out.suffix)
        fit_one(method.tau, cls_path)
        fit_one(method.tau_seg, seg_path)
    return 0


def cmd_score(args) -> int:
    bank = load_memory_bank(args.bank)
    seg_bank = load_memory_bank(args.seg_bank) if args.seg_bank else None
    manifest = load_manifest(args.manifest)
    tensors = load_referenced_tensors(manifest, Path(args.manifest).parent)
    features = gather_features(manifest, tensors)
    ids = manifest.record_ids()
    report = score_patches(bank, features, ids)
    grid_report = score_patches(seg_bank, features, ids) if seg_bank else None
    files = save_score_report(report, args.out_dir, stem=args.stem,
                              grid_report=grid_report)
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    dataset = dataset_from_config(cfg, Path(args.config).parent)
    method = method_from_config(cfg)
    noise = cfg.get("noise", {})
    row = run_cell(
        dataset,
        method,
        ratio=noise.get("ratio", 0.0),
        seed=noise.get("seed", 0),
        mode=noise.get("mode", "no_overlap"),
    )
    _write_csv([row], args.out, cfg)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    dataset = dataset_from_config(cfg, Path(args.config).parent)
    section = _require(cfg, "sweep")
    methods = [method_preset(name) for name in _require(section, "methods", "/sweep")]
    rows = sweep(
        dataset,
        methods,
        ratios=_require(section, "ratios", "/sweep"),
        seeds=_require(section, "seeds", "/sweep"),
        mode=section.get("mode", "overlap"),
        threads=_threads(args),
    )
    _write_csv(rows, args.out, cfg)
    return 0


def _write_csv(rows, out_path, cfg) -> None:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows), encoding="utf-8")
    sidecar = out.with_suffix(out.suffix + ".config.json")
    sidecar.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(rows)} rows) and {sidecar}")


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softpatch",
        description="Patch-level denoising and soft-weighted coreset anomaly detection.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap for sweep cells (default: SOFTPATCH_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic SPF1 dataset")
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inject-noise", help="move anomalous test samples into training")
    p.add_argument("--train", required=True, help="clean train manifest")
    p.add_argument("--test", required=True, help="test manifest")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--mode", choices=("no_overlap", "overlap"), default="no_overlap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("fit", help="build the memory bank(s) from a training manifest")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="bank path (-cls/-seg suffixes in dual mode)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score a test manifest against bank(s)")
    p.add_argument("--bank", required=True, help="bank for image scores")
    p.add_argument("--seg-bank", default=None, help="optional bank for patch grids")
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stem", default="report")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="run a single noise cell and emit CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a method x ratio x seed grid and emit CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
