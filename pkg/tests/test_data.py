"""Synthetic data generation, episode sampling, and on-disk round trips."""

import json

import numpy as np
import pytest

from gazezsl.data import (
    GenConfig,
    Sample,
    attribute_colors,
    fixations_to_heatmap,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    sample_episode,
    save_checkpoint,
    save_dataset,
)
from gazezsl.errors import (
    ChecksumError,
    ConfigError,
    GenerationError,
    TruncatedBlobError,
    VersionError,
)

SMALL = GenConfig(num_seen=3, num_unseen=2, num_attributes=4, images_per_class=4,
                  image_size=(16, 16, 3), blob_radius=1, gaze_channels=2,
                  word_dim=8, seed=5)


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(SMALL)


@pytest.fixture(scope="module")
def default_ds():
    return generate_synthetic(GenConfig())


class TestGenConfig:
    def test_default_is_valid(self):
        cfg = GenConfig()
        assert cfg.num_classes == 25

    def test_rejects_blob_too_large_for_cell(self):
        with pytest.raises(ConfigError):
            GenConfig(image_size=(16, 16, 3), blob_radius=3)  # 4px cells

    def test_rejects_grid_not_dividing_image(self):
        with pytest.raises(ConfigError):
            GenConfig(image_size=(30, 30, 3))

    def test_rejects_more_attributes_than_cells(self):
        with pytest.raises(ConfigError):
            GenConfig(num_attributes=17)

    def test_rejects_gaze_channels_above_k(self):
        with pytest.raises(ConfigError):
            GenConfig(gaze_channels=13)


class TestGenerate:
    def test_default_preset_counts(self, default_ds):
        assert default_ds.images.shape == (1000, 32, 32, 3)
        assert default_ds.embeddings.matrix.shape == (25, 12)

    def test_same_seed_is_byte_identical(self):
        a = generate_synthetic(SMALL)
        b = generate_synthetic(SMALL)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.gaze.tobytes() == b.gaze.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.fixations == b.fixations and a.blob_ledger == b.blob_ledger

    def test_blob_ledger_audit(self, default_ds):
        # every painted blob center must carry its attribute's exact color
        colors = attribute_colors(default_ds.gen_config).astype(np.float32)
        phi = default_ds.embeddings.matrix
        for i in range(0, default_ds.num_images, 97):
            entries = default_ds.blob_ledger[i]
            active = set(np.flatnonzero(phi[default_ds.labels[i]] > 0).tolist())
            assert {attr for attr, _, _ in entries} == active
            for attr, r, c in entries:
                np.testing.assert_array_equal(default_ds.images[i, r, c], colors[attr])

    def test_invariants_across_seeds(self):
        for seed in range(10):
            cfg = GenConfig(num_seen=3, num_unseen=2, num_attributes=4,
                            images_per_class=4, image_size=(16, 16, 3),
                            blob_radius=1, gaze_channels=2, word_dim=8, seed=seed)
            ds = generate_synthetic(cfg)  # __post_init__ checks the invariants
            assert not ds.embeddings.seen & ds.embeddings.unseen
            train_labels = ds.labels[list(ds.train_indices)]
            assert set(train_labels.tolist()) <= ds.embeddings.seen

    def test_gaze_channels_follow_distinctive_attributes(self, small_ds):
        phi_seen = small_ds.embeddings.matrix[:3]
        freq = (phi_seen > 0).sum(axis=0)
        expected = tuple(np.argsort(freq, kind="stable")[:2].tolist())
        assert small_ds.gaze_attributes == expected
        cell = 16 // 4
        for i in range(small_ds.num_images):
            active = set(a for a, _, _ in small_ds.blob_ledger[i])
            centers = {a: (r, c) for a, r, c in small_ds.blob_ledger[i]}
            for d, attr in enumerate(small_ds.gaze_attributes):
                channel = small_ds.gaze[i, d]
                if attr in active:
                    assert channel.max() == 1.0
                    r, c = centers[attr]
                    peak = np.unravel_index(channel.argmax(), channel.shape)
                    assert peak == (r // cell, c // cell)
                    assert small_ds.fixations[i][d] == (peak,)
                else:
                    np.testing.assert_array_equal(channel, 0.0)
                    assert small_ds.fixations[i][d] == ()

    def test_attribute_rows_unique_and_nonzero(self, small_ds):
        phi = small_ds.embeddings.matrix
        assert len({tuple(row) for row in phi}) == len(phi)
        assert np.all(phi.sum(axis=1) > 0)

    def test_impossible_row_budget_raises(self):
        with pytest.raises(GenerationError):
            generate_synthetic(GenConfig(num_seen=2, num_unseen=2, num_attributes=2,
                                         images_per_class=4, image_size=(16, 16, 3),
                                         blob_radius=1, gaze_channels=2))


class TestFixationsToHeatmap:
    def test_single_fixation_peaks_there(self):
        heat = fixations_to_heatmap([(2, 1)], (4, 4), blur_sigma=1.0)
        assert heat[2, 1] == 1.0
        assert heat.argmax() == 2 * 4 + 1

    def test_empty_points_give_zero_map(self):
        np.testing.assert_array_equal(fixations_to_heatmap([], (4, 4), 1.0), 0.0)

    def test_two_separated_fixations(self):
        heat = fixations_to_heatmap([(0, 0), (7, 7)], (8, 8), blur_sigma=0.8)
        assert heat.max() == 1.0
        np.testing.assert_allclose(heat[0, 0], heat[7, 7], rtol=1e-9)
        assert heat[3, 3] < 0.1  # a valley between the two peaks

    def test_rejects_out_of_grid_point(self):
        with pytest.raises(ValueError):
            fixations_to_heatmap([(4, 0)], (4, 4), 1.0)

    def test_rejects_nonpositive_blur(self):
        with pytest.raises(ValueError):
            fixations_to_heatmap([(0, 0)], (4, 4), 0.0)

    def test_range_and_exact_max(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pts = [tuple(p) for p in rng.integers(0, 6, size=(3, 2))]
            heat = fixations_to_heatmap(pts, (6, 6), blur_sigma=1.3)
            assert heat.min() >= 0.0 and heat.max() == 1.0


class TestSampleEpisode:
    def test_full_scale_episode(self, default_ds):
        batch = sample_episode(default_ds, 16, 2, np.random.default_rng(0))
        assert len(batch) == 32
        assert len({s.label for s in batch}) == 16
        assert all(isinstance(s, Sample) for s in batch)

    def test_rejects_m_above_seen_count(self, small_ds):
        with pytest.raises(ConfigError):
            sample_episode(small_ds, 4, 1, np.random.default_rng(0))

    def test_fixed_seed_reproduces_batch(self, small_ds):
        a = sample_episode(small_ds, 2, 2, np.random.default_rng(9))
        b = sample_episode(small_ds, 2, 2, np.random.default_rng(9))
        assert [s.index for s in a] == [s.index for s in b]

    def test_episodes_stay_within_seen_training_images(self, small_ds):
        rng = np.random.default_rng(1)
        train = set(small_ds.train_indices)
        for _ in range(20):
            for s in sample_episode(small_ds, 2, 2, rng):
                assert s.label in small_ds.embeddings.seen
                assert s.index in train
                assert s.gaze.shape == (4, 4, 2)

    def test_images_within_class_are_distinct(self, small_ds):
        rng = np.random.default_rng(2)
        for _ in range(10):
            batch = sample_episode(small_ds, 2, 2, rng)
            assert len({s.index for s in batch}) == len(batch)


class TestDatasetPersistence:
    def test_round_trip_is_bit_identical(self, small_ds, tmp_path):
        save_dataset(tmp_path / "ds", small_ds)
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.images.tobytes() == small_ds.images.tobytes()
        assert loaded.gaze.tobytes() == small_ds.gaze.tobytes()
        np.testing.assert_array_equal(loaded.labels, small_ds.labels)
        np.testing.assert_array_equal(loaded.embeddings.matrix, small_ds.embeddings.matrix)
        np.testing.assert_array_equal(loaded.word_vectors.matrix,
                                      small_ds.word_vectors.matrix)
        assert loaded.train_indices == small_ds.train_indices
        assert loaded.test_indices == small_ds.test_indices
        assert loaded.fixations == small_ds.fixations
        assert loaded.blob_ledger == small_ds.blob_ledger
        assert loaded.gaze_attributes == small_ds.gaze_attributes
        assert loaded.gen_config == small_ds.gen_config

    def test_flipped_byte_fails_checksum(self, small_ds, tmp_path):
        save_dataset(tmp_path / "ds", small_ds)
        blob = tmp_path / "ds" / "images.bin"
        raw = bytearray(blob.read_bytes())
        raw[100] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(tmp_path / "ds")

    def test_truncated_blob_is_distinct_error(self, small_ds, tmp_path):
        save_dataset(tmp_path / "ds", small_ds)
        blob = tmp_path / "ds" / "gaze.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(TruncatedBlobError):
            load_dataset(tmp_path / "ds")

    def test_unknown_version_rejected(self, small_ds, tmp_path):
        save_dataset(tmp_path / "ds", small_ds)
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(VersionError):
            load_dataset(tmp_path / "ds")


class TestCheckpointPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"stage0.kernel": rng.standard_normal((2, 2, 1, 3)),
                   "proj": rng.standard_normal((3, 4))}
        save_checkpoint(tmp_path / "ck", tensors, {"lr": 1e-3, "epochs": 10}, epoch=7)
        loaded, config, epoch = load_checkpoint(tmp_path / "ck")
        assert epoch == 7 and config == {"lr": 1e-3, "epochs": 10}
        assert list(loaded) == list(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])

    def test_corrupted_tensors_fail_checksum(self, tmp_path):
        save_checkpoint(tmp_path / "ck", {"w": np.ones((4, 4))}, {}, epoch=0)
        blob = tmp_path / "ck" / "tensors.bin"
        raw = bytearray(blob.read_bytes())
        raw[8] ^= 0x01
        blob.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_checkpoint(tmp_path / "ck")

    def test_truncation_detected(self, tmp_path):
        save_checkpoint(tmp_path / "ck", {"w": np.ones(8)}, {}, epoch=0)
        blob = tmp_path / "ck" / "tensors.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(TruncatedBlobError):
            load_checkpoint(tmp_path / "ck")

    def test_kind_mismatch_is_version_error(self, small_ds, tmp_path):
        save_dataset(tmp_path / "ds", small_ds)
        with pytest.raises(VersionError):
            load_checkpoint(tmp_path / "ds")
