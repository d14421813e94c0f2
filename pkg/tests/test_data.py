"""Synthetic dataset tests: determinism, label structure, splits, the
constrained frame sampler, and the identity-balanced batch sampler."""

import numpy as np
import pytest

from asanet import data as D
from asanet.errors import ConfigError, EmptyTrackletError, FormatError


@pytest.fixture(scope="module")
def small_dataset():
    return D.gen_dataset(seed=11, num_identities=6, tracklets_per_identity=8,
                         cameras=2, frames_per_tracklet=12)


class TestGeneration:
    def test_deterministic_bytes(self):
        a = D.gen_dataset(seed=3, num_identities=4, tracklets_per_identity=4,
                          cameras=2, frames_per_tracklet=6)
        b = D.gen_dataset(seed=3, num_identities=4, tracklets_per_identity=4,
                          cameras=2, frames_per_tracklet=6)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.manifest == b.manifest

    def test_different_seed_differs(self):
        a = D.gen_dataset(seed=3, num_identities=4, tracklets_per_identity=4)
        b = D.gen_dataset(seed=4, num_identities=4, tracklets_per_identity=4)
        assert a.frames.tobytes() != b.frames.tobytes()

    def test_tracklet_count(self):
        ds = D.gen_dataset(seed=1, num_identities=20, tracklets_per_identity=8)
        assert ds.num_tracklets == 160

    def test_frames_shape_and_range(self, small_dataset):
        ds = small_dataset
        assert ds.frames.shape == (48, 12, 3, 64, 32)
        assert ds.frames.dtype == np.dtype("<f4")
        assert ds.frames.min() >= 0.0 and ds.frames.max() <= 1.0

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            D.gen_dataset(seed=0, num_identities=2, tracklets_per_identity=1)
        with pytest.raises(ConfigError):
            D.gen_dataset(seed=0, num_identities=1, tracklets_per_identity=4)
        with pytest.raises(ConfigError):
            D.gen_dataset(seed=0, cameras=0)

    def test_label_schema_sizes(self, small_dataset):
        assert small_dataset.re_labels().shape[1] == 14
        assert small_dataset.ir_labels().shape[1] == 7

    def test_re_constant_ir_varying_within_identity(self, small_dataset):
        """Over >= 100 same-identity tracklet pairs the ID-relevant rows are
        equal and the ID-irrelevant rows differ."""
        ds = small_dataset
        y_re, y_ir = ds.re_labels(), ds.ir_labels()
        labels = ds.labels()
        rng = np.random.default_rng(0)
        pairs = 0
        while pairs < 120:
            i, j = rng.integers(0, ds.num_tracklets, size=2)
            if i == j or labels[i] != labels[j]:
                continue
            np.testing.assert_array_equal(y_re[i], y_re[j])
            assert not np.array_equal(y_ir[i], y_ir[j])
            pairs += 1

    def test_ir_diversity_per_identity(self, small_dataset):
        ds = small_dataset
        y_ir = ds.ir_labels()
        for ident in range(6):
            rows = y_ir[ds.labels() == ident]
            assert len(np.unique(rows, axis=0)) >= 2

    def test_motion_translates_sprite(self, small_dataset):
        ds = small_dataset
        for track in ds.tracklets:
            clip = ds.frames[track.tracklet]
            if track.motion == 0:
                np.testing.assert_array_equal(clip[0], clip[2])
            else:
                assert np.abs(clip[0] - clip[2]).max() > 0.05

    def test_top_color_changes_torso_pixels(self):
        ds = D.gen_dataset(seed=5, num_identities=8, tracklets_per_identity=4)
        torso_band = ds.frames[:, 0, :, 20:28, :]
        ids = ds.labels()
        tops = np.array([ds.identities[i].top_color for i in ids])
        a = np.flatnonzero(tops == tops[0])[0]
        diff_top = np.flatnonzero(tops != tops[0])
        assert diff_top.size > 0
        assert np.abs(torso_band[a] - torso_band[diff_top[0]]).max() > 0.2


class TestSplits:
    def test_partition(self, small_dataset):
        ds = small_dataset
        train, query, gallery = ds.split("train"), ds.split("query"), ds.split("gallery")
        assert sorted(train + query + gallery) == list(range(ds.num_tracklets))

    def test_every_identity_trains(self, small_dataset):
        assert small_dataset.num_train_identities == 6

    def test_gallery_has_cross_camera_match(self, small_dataset):
        ds = small_dataset
        g_ids = ds.labels(ds.split("gallery"))
        g_cams = ds.cameras(ds.split("gallery"))
        for q in ds.split("query"):
            t = ds.tracklets[q]
            ok = ((g_ids == t.identity) & (g_cams != t.camera)).any()
            assert ok, f"query {q} lacks a cross-camera match"

    def test_unmatched_queries(self):
        ds = D.gen_dataset(seed=2, num_identities=8, tracklets_per_identity=8,
                           unmatched_queries=2)
        q_ids = set(ds.labels(ds.split("query")))
        g_ids = set(ds.labels(ds.split("gallery")))
        unmatched = q_ids - g_ids
        assert len(unmatched) == 2
        q_list = list(ds.labels(ds.split("query")))
        for ident in unmatched:
            assert q_list.count(ident) == 2  # they can match each other when merged

    def test_distractors_in_gallery(self):
        ds = D.gen_dataset(seed=2, num_identities=4, tracklets_per_identity=6,
                           distractors=3)
        g_ids = ds.labels(ds.split("gallery"))
        assert (g_ids == -1).sum() == 3
        assert (ds.ir_labels([i for i in ds.split("gallery")
                              if ds.tracklets[i].identity == -1]) == 0).all()


class TestSaveLoad:
    def test_roundtrip(self, small_dataset, tmp_path):
        D.save_dataset(small_dataset, tmp_path / "ds")
        loaded = D.load_dataset(tmp_path / "ds")
        assert loaded.frames.tobytes() == small_dataset.frames.tobytes()
        assert loaded.manifest == small_dataset.manifest
        assert loaded.tracklets == small_dataset.tracklets

    def test_save_is_deterministic(self, small_dataset, tmp_path):
        D.save_dataset(small_dataset, tmp_path / "x")
        D.save_dataset(small_dataset, tmp_path / "y")
        assert (tmp_path / "x" / "manifest.json").read_bytes() == \
            (tmp_path / "y" / "manifest.json").read_bytes()
        assert (tmp_path / "x" / "frames.bin").read_bytes() == \
            (tmp_path / "y" / "frames.bin").read_bytes()

    def test_truncated_frames_rejected(self, small_dataset, tmp_path):
        D.save_dataset(small_dataset, tmp_path / "ds")
        raw = (tmp_path / "ds" / "frames.bin").read_bytes()
        (tmp_path / "ds" / "frames.bin").write_bytes(raw[:-100])
        with pytest.raises(FormatError):
            D.load_dataset(tmp_path / "ds")


class TestConstrainedSampling:
    def test_chunk_structure(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            picks = D.constrained_random_sample(12, 6, rng)
            assert all(2 * j <= picks[j] < 2 * (j + 1) for j in range(6))
            assert (np.diff(picks) > 0).all()

    def test_exact_length_forced(self):
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(
            D.constrained_random_sample(6, 6, rng), np.arange(6)
        )

    def test_wraparound_padding(self):
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(
            D.constrained_random_sample(4, 6, rng), [0, 1, 2, 3, 0, 1]
        )

    def test_empty_tracklet(self):
        with pytest.raises(EmptyTrackletError):
            D.constrained_random_sample(0, 6, np.random.default_rng(0))

    def test_within_chunk_distribution(self):
        """Monte Carlo: with L=12, T=6 each chunk member is drawn ~50%."""
        rng = np.random.default_rng(123)
        counts = np.zeros((6, 2))
        n = 10_000
        for _ in range(n):
            picks = D.constrained_random_sample(12, 6, rng)
            for j, p in enumerate(picks):
                counts[j, p - 2 * j] += 1
        freq = counts / n
        assert np.abs(freq - 0.5).max() <= 0.02


class TestPKBatchSampler:
    def test_paper_scale_batch(self, tmp_path):
        ds = D.gen_dataset(seed=7, num_identities=10, tracklets_per_identity=8)
        sampler = D.PKBatchSampler(ds.train_groups(), p=8, k=4,
                                   rng=np.random.default_rng(1))
        batch_idx = sampler.epoch()[0]
        assert len(batch_idx) == 32
        batch = D.make_batch(ds, batch_idx, 6, np.random.default_rng(2))
        assert batch.frames.shape == (32, 6, 3, 64, 32)
        assert batch.frames.shape[0] * batch.frames.shape[1] == 192

    def test_toy_structure(self, small_dataset):
        sampler = D.PKBatchSampler(small_dataset.train_groups(), p=2, k=3,
                                   rng=np.random.default_rng(3))
        for batch_idx in sampler.epoch():
            ids = small_dataset.labels(batch_idx)
            values, counts = np.unique(ids, return_counts=True)
            assert len(values) == 2
            assert (counts == 3).all()

    def test_epoch_covers_every_identity(self, small_dataset):
        sampler = D.PKBatchSampler(small_dataset.train_groups(), p=4, k=2,
                                   rng=np.random.default_rng(4))
        seen = set()
        for batch_idx in sampler.epoch():
            seen.update(small_dataset.labels(batch_idx).tolist())
        assert seen == set(range(6))

    def test_replacement_when_short(self):
        groups = {0: [0], 1: [1, 2], 2: [3, 4, 5]}
        sampler = D.PKBatchSampler(groups, p=3, k=3, rng=np.random.default_rng(5))
        batch = sampler.epoch()[0]
        assert len(batch) == 9

    def test_too_few_identities(self):
        with pytest.raises(ConfigError):
            D.PKBatchSampler({0: [0]}, p=2, k=2, rng=np.random.default_rng(0))

    def test_deterministic_given_rng_seed(self, small_dataset):
        groups = small_dataset.train_groups()
        a = D.PKBatchSampler(groups, 3, 2, np.random.default_rng(9)).epoch()
        b = D.PKBatchSampler(groups, 3, 2, np.random.default_rng(9)).epoch()
        assert a == b
