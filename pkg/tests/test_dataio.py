"""Dataset format round trips, pooling, and the synthetic generator."""

import json
import math
import struct

import numpy as np
import pytest

from fsleval import (
    DataFormatError,
    EmbeddingDataset,
    LayerKey,
    SyntheticLayer,
    SyntheticSpec,
    bayes_accuracy,
    generate_synthetic,
    global_average_pool,
    load_dataset,
    simplex_means,
    write_dataset,
)

from helpers import oracle_gap


class TestGlobalAveragePool:
    def test_constant_channel(self):
        tensor = np.full((3, 4, 5), 0.0)
        tensor[0], tensor[1], tensor[2] = 1.5, -2.0, 7.0
        np.testing.assert_allclose(global_average_pool(tensor), [1.5, -2.0, 7.0])

    def test_small_mean(self):
        tensor = np.array([[[1.0, 3.0], [1.0, 3.0]]])
        np.testing.assert_allclose(global_average_pool(tensor), [2.0])

    def test_matches_sum_divide_oracle(self):
        rng = np.random.default_rng(0)
        tensor = rng.standard_normal((2, 4, 4))
        np.testing.assert_allclose(
            global_average_pool(tensor), oracle_gap(tensor), atol=1e-6
        )

    def test_commutes_with_channel_permutation(self):
        rng = np.random.default_rng(1)
        tensor = rng.standard_normal((5, 3, 7))
        perm = rng.permutation(5)
        np.testing.assert_array_equal(
            global_average_pool(tensor)[perm], global_average_pool(tensor[perm])
        )

    def test_empty_spatial_extent(self):
        with pytest.raises(ValueError, match="spatial"):
            global_average_pool(np.zeros((2, 0, 3)))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match="3-axis"):
            global_average_pool(np.zeros((2, 3)))


def _small_dataset(num_items=10, dim=4, models=("m0",), seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=num_items)
    features = {
        LayerKey(m, j): rng.standard_normal((num_items, dim)).astype(np.float32)
        for m in models
        for j in range(2 if len(models) > 1 else 1)
    }
    return EmbeddingDataset.build(labels, features)


class TestFormatRoundTrip:
    def test_structural_load(self, tmp_path):
        dataset = _small_dataset()
        write_dataset(dataset, tmp_path)
        loaded = load_dataset(tmp_path / "manifest.json")
        assert loaded.num_items == 10
        assert loaded.layer_keys == [LayerKey("m0", 0)]
        assert loaded.features[LayerKey("m0", 0)].shape == (10, 4)

    def test_bit_identical_payload(self, tmp_path):
        dataset = _small_dataset(models=("alpha", "beta"), seed=3)
        write_dataset(dataset, tmp_path)
        loaded = load_dataset(tmp_path)
        assert list(loaded.features) == list(dataset.features)
        for key, matrix in dataset.features.items():
            assert loaded.features[key].tobytes() == matrix.tobytes()
        np.testing.assert_array_equal(loaded.labels, dataset.labels)

    def test_emits_manifest_and_layer_file(self, tmp_path):
        write_dataset(_small_dataset(), tmp_path)
        assert (tmp_path / "manifest.json").is_file()
        assert (tmp_path / "m0_layer0.fslb").is_file()

    def test_sparse_layer_indices_rejected(self, tmp_path):
        rng = np.random.default_rng(0)
        dataset = EmbeddingDataset.build(
            [0, 1],
            {
                LayerKey("m0", 0): rng.standard_normal((2, 2)).astype(np.float32),
                LayerKey("m0", 2): rng.standard_normal((2, 2)).astype(np.float32),
            },
        )
        with pytest.raises(ValueError, match="0..L-1"):
            write_dataset(dataset, tmp_path)

    def test_unwritable_target_leaves_no_manifest(self, tmp_path):
        blocker = tmp_path / "blocked"
        blocker.write_text("a plain file, not a directory")
        with pytest.raises(OSError):
            write_dataset(_small_dataset(), blocker)
        assert blocker.is_file()
        assert not list(tmp_path.glob("**/manifest.json"))


class TestFormatErrors:
    def test_row_count_mismatch_names_both_files(self, tmp_path):
        dataset = _small_dataset(num_items=10)
        write_dataset(dataset, tmp_path)
        labels_file = tmp_path / "labels.bin"
        labels_file.write_bytes(labels_file.read_bytes()[:-4])  # drop one entry
        with pytest.raises(DataFormatError) as err:
            load_dataset(tmp_path)
        assert "labels.bin" in str(err.value)
        assert "m0_layer0.fslb" in str(err.value)

    def test_bad_magic(self, tmp_path):
        write_dataset(_small_dataset(), tmp_path)
        layer = tmp_path / "m0_layer0.fslb"
        layer.write_bytes(b"XXXX" + layer.read_bytes()[4:])
        with pytest.raises(DataFormatError, match="magic"):
            load_dataset(tmp_path)

    def test_bad_version(self, tmp_path):
        write_dataset(_small_dataset(), tmp_path)
        layer = tmp_path / "m0_layer0.fslb"
        raw = bytearray(layer.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        layer.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="version"):
            load_dataset(tmp_path)

    def test_missing_layer_file(self, tmp_path):
        write_dataset(_small_dataset(), tmp_path)
        (tmp_path / "m0_layer0.fslb").unlink()
        with pytest.raises(DataFormatError, match="missing layer file"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataFormatError, match="manifest"):
            load_dataset(tmp_path / "nope")

    def test_non_finite_value_reports_offset(self, tmp_path):
        write_dataset(_small_dataset(), tmp_path)
        layer = tmp_path / "m0_layer0.fslb"
        raw = bytearray(layer.read_bytes())
        element = 7
        offset = 20 + 4 * element
        raw[offset : offset + 4] = struct.pack("<f", math.nan)
        layer.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError) as err:
            load_dataset(tmp_path)
        assert str(offset) in str(err.value)
        assert "m0_layer0.fslb" in str(err.value)

    def test_truncated_payload(self, tmp_path):
        write_dataset(_small_dataset(), tmp_path)
        layer = tmp_path / "m0_layer0.fslb"
        layer.write_bytes(layer.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="bytes"):
            load_dataset(tmp_path)


class TestSpatialLayers:
    def test_load_pools_declared_shape(self, tmp_path):
        rng = np.random.default_rng(5)
        c, h, w = 3, 2, 4
        payload = rng.standard_normal((6, c, h, w)).astype(np.float32)
        header = struct.pack("<4sIQI", b"FSLB", 1, 6, c * h * w)
        (tmp_path / "conv.fslb").write_bytes(header + payload.tobytes())
        (tmp_path / "labels.bin").write_bytes(
            np.arange(6, dtype="<u4").tobytes()
        )
        manifest = {
            "version": 1,
            "num_items": 6,
            "labels_file": "labels.bin",
            "models": [
                {
                    "model_id": "cnn",
                    "layers": [
                        {"layer_index": 0, "shape": [c, h, w], "file": "conv.fslb"}
                    ],
                }
            ],
        }
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        loaded = load_dataset(tmp_path)
        pooled = loaded.features[LayerKey("cnn", 0)]
        assert pooled.shape == (6, c)
        expected = np.stack([oracle_gap(item) for item in payload])
        np.testing.assert_allclose(pooled, expected.astype(np.float32), atol=1e-6)


class TestDatasetInvariants:
    def test_rejects_row_mismatch(self):
        with pytest.raises(ValueError, match="rows"):
            EmbeddingDataset.build(
                [0, 1, 0], {LayerKey("m", 0): np.zeros((2, 2), dtype=np.float32)}
            )

    def test_rejects_non_finite(self):
        bad = np.zeros((3, 2), dtype=np.float32)
        bad[1, 1] = np.inf
        with pytest.raises(ValueError, match="finite"):
            EmbeddingDataset.build([0, 1, 0], {LayerKey("m", 0): bad})

    def test_class_index_and_items(self):
        ds = EmbeddingDataset.build(
            [1, 0, 1, 2], {LayerKey("m", 0): np.ones((4, 1), dtype=np.float32)}
        )
        assert list(ds.items) == [(0, 1), (1, 0), (2, 1), (3, 2)]
        np.testing.assert_array_equal(ds.class_index[1], [0, 2])
        assert ds.num_classes == 3

    def test_features_are_immutable(self):
        ds = _small_dataset()
        with pytest.raises(ValueError):
            ds.features[LayerKey("m0", 0)][0, 0] = 1.0


class TestSimplexMeans:
    def test_equal_pairwise_separation(self):
        means = simplex_means(6, 10, 3.5)
        for i in range(6):
            for j in range(i + 1, 6):
                np.testing.assert_allclose(
                    np.linalg.norm(means[i] - means[j]), 3.5, rtol=1e-12
                )

    def test_centred(self):
        np.testing.assert_allclose(simplex_means(4, 8, 2.0).mean(axis=0), 0, atol=1e-12)


class TestGenerateSynthetic:
    def test_zero_shift_keeps_generating_frame(self):
        spec = SyntheticSpec(4, 200, 8, class_separation=3.0, noise_sigma=1e-4)
        ds = generate_synthetic(spec, seed=9)
        means = simplex_means(4, 8, 3.0)
        for cid, rows in ds.class_index.items():
            observed = ds.features[LayerKey("m0", 0)][rows].mean(axis=0)
            np.testing.assert_allclose(observed, means[cid], atol=1e-4)

    def test_deterministic(self):
        spec = SyntheticSpec(
            3,
            5,
            4,
            class_separation=2.0,
            shift_level=1.5,
            layers=(
                SyntheticLayer("a", 0, "informative"),
                SyntheticLayer("a", 1, "pure-noise", 6),
                SyntheticLayer("b", 0, "random-projection", 3),
            ),
        )
        first = generate_synthetic(spec, seed=123)
        second = generate_synthetic(spec, seed=123)
        for key in first.features:
            assert first.features[key].tobytes() == second.features[key].tobytes()
        assert generate_synthetic(spec, seed=124).features[
            LayerKey("a", 0)
        ].tobytes() != first.features[LayerKey("a", 0)].tobytes()

    def test_nearest_mean_matches_bayes_oracle(self):
        spec = SyntheticSpec(2, 5000, 8, class_separation=4.0, noise_sigma=1.0)
        ds = generate_synthetic(spec, seed=11)
        means = simplex_means(2, 8, 4.0)
        x = ds.features[LayerKey("m0", 0)].astype(np.float64)
        d2 = ((x[:, None, :] - means[None]) ** 2).sum(axis=2)
        accuracy = float(np.mean(d2.argmin(axis=1) == ds.labels))
        assert abs(accuracy - bayes_accuracy(spec)) < 0.02

    def test_pure_noise_is_label_independent(self):
        spec = SyntheticSpec(
            2,
            2000,
            8,
            class_separation=6.0,
            layers=(SyntheticLayer("m0", 0, "pure-noise"),),
        )
        ds = generate_synthetic(spec, seed=2)
        x = ds.features[LayerKey("m0", 0)].astype(np.float64)
        class_means = np.stack(
            [x[rows].mean(axis=0) for rows in ds.class_index.values()]
        )
        # both class means concentrate near 0 at rate sigma / sqrt(n)
        assert np.abs(class_means).max() < 5.0 / math.sqrt(2000)

    def test_random_projection_keeps_class_signal(self):
        spec = SyntheticSpec(
            2,
            1000,
            8,
            class_separation=8.0,
            layers=(
                SyntheticLayer("m0", 0, "informative"),
                SyntheticLayer("m0", 1, "random-projection", 16),
            ),
        )
        ds = generate_synthetic(spec, seed=4)
        x = ds.features[LayerKey("m0", 1)].astype(np.float64)
        protos = np.stack([x[rows].mean(axis=0) for rows in ds.class_index.values()])
        d2 = ((x[:, None, :] - protos[None]) ** 2).sum(axis=2)
        accuracy = float(np.mean(d2.argmin(axis=1) == ds.labels))
        assert accuracy > 0.9

    def test_shift_is_rigid(self):
        # the same seed at two shift levels yields isometric clouds
        base = dict(num_classes=3, items_per_class=50, dim=6, class_separation=3.0)
        flat = generate_synthetic(SyntheticSpec(**base, shift_level=0.0), seed=6)
        moved = generate_synthetic(SyntheticSpec(**base, shift_level=2.0), seed=6)
        key = LayerKey("m0", 0)
        a = flat.features[key].astype(np.float64)
        b = moved.features[key].astype(np.float64)
        da = np.linalg.norm(a[:40, None] - a[None, 40:80], axis=2)
        db = np.linalg.norm(b[:40, None] - b[None, 40:80], axis=2)
        np.testing.assert_allclose(da, db, rtol=1e-4, atol=1e-4)

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(1, 5, 4, 1.0).validate()
        with pytest.raises(ValueError):
            SyntheticSpec(2, 5, 4, 1.0, noise_sigma=0.0).validate()
        with pytest.raises(ValueError, match="dim >= num_classes"):
            SyntheticSpec(8, 5, 4, 1.0).validate()
        with pytest.raises(ValueError, match="kind"):
            SyntheticSpec(
                2, 5, 4, 1.0, layers=(SyntheticLayer(kind="mystery"),)
            ).validate()


class TestBayesAccuracy:
    def test_zero_separation_is_chance(self):
        assert bayes_accuracy(SyntheticSpec(4, 1, 8, 0.0)) == 0.25
        assert bayes_accuracy(SyntheticSpec(2, 1, 4, 0.0)) == 0.5

    def test_two_class_closed_form(self):
        value = bayes_accuracy(SyntheticSpec(2, 1, 4, class_separation=2.0))
        # Phi(1), frozen from the standard normal CDF
        assert abs(value - 0.8413447460685429) < 1e-12

    def test_large_separation_saturates(self):
        assert bayes_accuracy(SyntheticSpec(2, 1, 4, 12.0)) >= 0.9999
        assert bayes_accuracy(SyntheticSpec(3, 1, 8, 12.0), mc_samples=50_000) >= 0.9999

    def test_monotone_on_grid(self):
        sigmas = [0.5, 1.0, 2.0]
        separations = [0.5, 1.0, 2.0, 4.0]
        table = {
            (sep, sig): bayes_accuracy(
                SyntheticSpec(3, 1, 8, sep, noise_sigma=sig), mc_samples=40_000
            )
            for sep in separations
            for sig in sigmas
        }
        for sig in sigmas:
            row = [table[(sep, sig)] for sep in separations]
            assert all(a <= b for a, b in zip(row, row[1:]))
        for sep in separations:
            col = [table[(sep, sig)] for sig in sigmas]
            assert all(a >= b for a, b in zip(col, col[1:]))
