import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from softpatch.errors import (
    ConfigError,
    DuplicateId,
    MalformedHeader,
    NonFiniteValue,
    SchemaError,
    TruncatedPayload,
)
from softpatch.feature_store import (
    DatasetManifest,
    FeatureTensor,
    SampleRecord,
    SyntheticSpec,
    gather_features,
    gather_masks,
    generate_synthetic,
    generate_synthetic_dataset,
    load_manifest,
    load_referenced_tensors,
    read_feature_file,
    save_manifest,
    save_synthetic_dataset,
    write_feature_file,
)


class TestSpf1Format:
    def test_minimal_tensor_is_40_bytes(self, tmp_path):
        path = tmp_path / "one.spf1"
        write_feature_file(FeatureTensor(np.zeros((1, 1, 1, 1), dtype=np.float32)), path)
        raw = path.read_bytes()
        assert len(raw) == 40  # 4 magic + 32 dims + 4 payload
        assert raw[:4] == b"SPF1"
        assert struct.unpack("<4Q", raw[4:36]) == (1, 1, 1, 1)

    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensor = FeatureTensor(rng.normal(size=(2, 3, 3, 8)).astype(np.float32))
        path = tmp_path / "t.spf1"
        write_feature_file(tensor, path)
        back = read_feature_file(path)
        assert back.data.tobytes() == tensor.data.tobytes()

    def test_wrong_magic_is_rejected(self, tmp_path):
        path = tmp_path / "bad.spf1"
        path.write_bytes(b"SPF0" + struct.pack("<4Q", 1, 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(MalformedHeader):
            read_feature_file(path)

    def test_short_payload_is_rejected(self, tmp_path):
        path = tmp_path / "short.spf1"
        path.write_bytes(b"SPF1" + struct.pack("<4Q", 2, 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(TruncatedPayload):
            read_feature_file(path)

    def test_trailing_bytes_are_rejected(self, tmp_path):
        path = tmp_path / "long.spf1"
        path.write_bytes(b"SPF1" + struct.pack("<4Q", 1, 1, 1, 1) + b"\x00" * 8)
        with pytest.raises(MalformedHeader):
            read_feature_file(path)

    def test_zero_dimension_is_rejected(self, tmp_path):
        path = tmp_path / "zero.spf1"
        path.write_bytes(b"SPF1" + struct.pack("<4Q", 0, 1, 1, 1))
        with pytest.raises(MalformedHeader):
            read_feature_file(path)

    def test_nan_payload_reports_flat_index(self, tmp_path):
        values = np.zeros(6, dtype="<f4")
        values[4] = np.nan
        path = tmp_path / "nan.spf1"
        path.write_bytes(b"SPF1" + struct.pack("<4Q", 1, 2, 3, 1) + values.tobytes())
        with pytest.raises(NonFiniteValue) as err:
            read_feature_file(path)
        assert err.value.index == 4

    @settings(max_examples=25, deadline=None)
    @given(
        shape=st.tuples(*(st.integers(1, 4) for _ in range(4))),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, shape, seed):
        rng = np.random.default_rng(seed)
        tensor = FeatureTensor(
            rng.uniform(-1e6, 1e6, size=shape).astype(np.float32)
        )
        path = tmp_path_factory.mktemp("spf") / "p.spf1"
        write_feature_file(tensor, path)
        assert np.array_equal(read_feature_file(path).data, tensor.data)

    def test_constructor_rejects_non_finite(self):
        bad = np.zeros((1, 1, 2, 1), dtype=np.float32)
        bad[0, 0, 1, 0] = np.inf
        with pytest.raises(NonFiniteValue) as err:
            FeatureTensor(bad)
        assert err.value.index == 1


def make_manifest(records=None, **overrides):
    fields = dict(
        name="toy", split="train", noise_ratio=0.0, overlap_mode="none", seed=1
    )
    fields.update(overrides)
    if records is None:
        records = (
            SampleRecord("a", "normal", "f.spf1#0", "train_clean"),
            SampleRecord("b", "normal", "f.spf1#1", "train_clean"),
            SampleRecord("c", "anomalous", "f.spf1#2", "test", mask_ref="m.spf1#0"),
        )
    return DatasetManifest(records=records, **fields)


class TestManifests:
    def test_round_trip(self, tmp_path):
        manifest = make_manifest(split="test")
        path = tmp_path / "m.json"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest

    def test_empty_records_requires_zero_ratio(self):
        assert make_manifest(records=()).noise_ratio == 0.0
        with pytest.raises(SchemaError):
            make_manifest(records=(), noise_ratio=0.5)

    def test_duplicate_id_rejected(self):
        records = (
            SampleRecord("a", "normal", "f.spf1#0", "train_clean"),
            SampleRecord("a", "normal", "f.spf1#1", "train_clean"),
        )
        with pytest.raises(DuplicateId):
            make_manifest(records=records)

    def test_unknown_key_rejected_with_pointer(self, tmp_path):
        doc = {
            "schema_version": 1, "name": "x", "split": "train",
            "noise_ratio": 0.0, "overlap_mode": "none", "seed": 0,
            "records": [], "shiny": True,
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError) as err:
            load_manifest(path)
        assert err.value.pointer == "/shiny"

    def test_unknown_record_key_pointer(self, tmp_path):
        doc = {
            "schema_version": 1, "name": "x", "split": "train",
            "noise_ratio": 0.0, "overlap_mode": "none", "seed": 0,
            "records": [{
                "id": "a", "label": "normal", "feature_ref": "f.spf1#0",
                "origin": "train_clean", "mask_ref": None, "extra": 1,
            }],
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError) as err:
            load_manifest(path)
        assert err.value.pointer == "/records/0/extra"

    def test_missing_field_pointer(self, tmp_path):
        doc = {
            "schema_version": 1, "name": "x", "split": "train",
            "noise_ratio": 0.0, "overlap_mode": "none", "records": [],
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError) as err:
            load_manifest(path)
        assert err.value.pointer == "/seed"

    def test_normal_sample_with_mask_rejected(self):
        records = (SampleRecord("a", "normal", "f#0", "train_clean", mask_ref="m#0"),)
        with pytest.raises(SchemaError):
            make_manifest(records=records)

    def test_noise_ratio_consistency_enforced_for_train(self):
        records = tuple(
            SampleRecord(f"n{i}", "normal", f"f#{i}", "train_clean") for i in range(2)
        ) + tuple(
            SampleRecord(f"a{i}", "anomalous", f"f#{2 + i}", "injected_noise")
            for i in range(2)
        )
        make_manifest(records=records, noise_ratio=0.5)  # exact
        make_manifest(records=records, noise_ratio=0.3)  # within 1/4
        with pytest.raises(SchemaError):
            make_manifest(records=records, noise_ratio=0.1)  # off by 0.4 > 1/4


class TestSyntheticGenerator:
    def test_determinism_bit_identical(self):
        spec = SyntheticSpec(n_normal=12, n_anomalous=4, grid=(2, 3), channels=6, seed=9)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert a.train.data.tobytes() == b.train.data.tobytes()
        assert a.test.data.tobytes() == b.test.data.tobytes()
        assert a.masks.data.tobytes() == b.masks.data.tobytes()
        assert a.train_manifest == b.train_manifest
        assert a.test_manifest == b.test_manifest

    def test_full_fraction_gives_all_ones_mask(self):
        spec = SyntheticSpec(
            n_normal=5, n_anomalous=1, grid=(2, 2), channels=4,
            anomaly_patch_fraction=1.0, seed=3,
        )
        ds = generate_synthetic(spec)
        assert np.array_equal(ds.masks.data[0, :, :, 0], np.ones((2, 2), dtype=np.float32))

    def test_shifted_patches_far_from_cluster_means(self):
        # Brute-force scan: every shifted patch sits farther than
        # 5 * sigma * sqrt(c) from every cluster mean of its position.
        spec = SyntheticSpec(
            n_normal=100, n_anomalous=20, grid=(3, 3), channels=8,
            cluster_sigma=0.5, anomaly_offset=10.0, seed=17,
        )
        ds = generate_synthetic(spec)
        c = spec.channels
        threshold = 5.0 * spec.cluster_sigma * np.sqrt(c)
        anom = ds.test.data[spec.n_anomalous:].reshape(spec.n_anomalous, -1, c)
        mask = ds.masks.data[..., 0].reshape(spec.n_anomalous, -1)
        worst = np.inf
        for p in range(anom.shape[1]):
            shifted = anom[mask[:, p] > 0, p].astype(np.float64)
            if len(shifted) == 0:
                continue
            worst = min(worst, cdist(shifted, ds.cluster_means[p]).min())
        assert worst > threshold

    def test_separability_contract(self):
        # At offset >= 4 every shifted patch is farther than 2*sigma*sqrt(c)
        # from every unshifted patch at the same position (brute force).
        spec = SyntheticSpec(
            n_normal=40, n_anomalous=10, grid=(2, 2), channels=4,
            anomaly_offset=4.0, seed=5,
        )
        ds = generate_synthetic(spec)  # generator self-check also asserts this
        c = spec.channels
        threshold = 2.0 * spec.cluster_sigma * np.sqrt(c)
        n_a = spec.n_anomalous
        anom = ds.test.data[n_a:].reshape(n_a, -1, c).astype(np.float64)
        normal = np.concatenate(
            [ds.train.data.reshape(spec.n_normal, -1, c),
             ds.test.data[:n_a].reshape(n_a, -1, c)]
        ).astype(np.float64)
        mask = ds.masks.data[..., 0].reshape(n_a, -1)
        for p in range(anom.shape[1]):
            shifted = anom[mask[:, p] > 0, p]
            others = np.concatenate([normal[:, p], anom[mask[:, p] == 0, p]])
            if len(shifted):
                assert cdist(shifted, others).min() > threshold

    def test_four_tuple_wrapper_matches_rich_result(self):
        spec = SyntheticSpec(n_normal=6, n_anomalous=2, grid=(2, 2), channels=3, seed=1)
        train, test, train_m, test_m = generate_synthetic_dataset(spec)
        ds = generate_synthetic(spec)
        assert np.array_equal(train.data, ds.train.data)
        assert np.array_equal(test.data, ds.test.data)
        assert train_m == ds.train_manifest and test_m == ds.test_manifest

    def test_invalid_spec_fields(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(n_normal=0, n_anomalous=1, grid=(2, 2), channels=3)
        with pytest.raises(ConfigError):
            SyntheticSpec(n_normal=1, n_anomalous=1, grid=(2, 2), channels=3,
                          anomaly_patch_fraction=0.0)

    def test_saved_dataset_resolves_through_refs(self, tmp_path):
        spec = SyntheticSpec(n_normal=8, n_anomalous=3, grid=(2, 2), channels=4, seed=2)
        ds = generate_synthetic(spec)
        save_synthetic_dataset(ds, tmp_path)
        manifest = load_manifest(tmp_path / "test.json")
        tensors = load_referenced_tensors(manifest, tmp_path)
        gathered = gather_features(manifest, tensors)
        assert np.array_equal(gathered.data, ds.test.data)
        masks = gather_masks(manifest, tensors, gathered.grid)
        assert masks.shape == (6, 2, 2)
        assert masks[:3].sum() == 0  # normals carry no mask
        assert np.array_equal(masks[3:], ds.masks.data[..., 0])
