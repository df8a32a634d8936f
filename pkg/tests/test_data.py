"""Preprocessing, windowing, splits, the synthetic oracle, and EMGB I/O."""

import numpy as np
import pytest

from tristream import (DataError, PreprocessConfig, Recording, RngState,
                       add_gaussian_noise, augment_with_noise, load_emgb,
                       save_emgb, slice_windows, split_ratio, split_repetition,
                       synth_generate, zscore)


class TestZscore:
    def test_hand_arithmetic(self):
        out = zscore(np.array([[1.0, 2.0, 3.0]]))
        assert np.allclose(out, [[-1.2247, 0.0, 1.2247]], atol=1e-4)

    def test_constant_channel_maps_to_zeros(self):
        out = zscore(np.array([[5.0] * 10, [1.0, 2.0] * 5]))
        assert np.array_equal(out[0], np.zeros(10))

    def test_idempotent_on_standardized_data(self):
        x = RngState(0).normal((4, 200))
        once = zscore(x)
        twice = zscore(once)
        assert np.max(np.abs(once - twice)) <= 1e-12

    def test_moment_invariants(self):
        x = RngState(1).normal((6, 500)) * 37.0 + 11.0
        out = zscore(x)
        assert np.max(np.abs(out.mean(axis=1))) <= 1e-10
        assert np.max(np.abs(out.std(axis=1) - 1.0)) <= 1e-10

    def test_empty_time_axis_rejected(self):
        with pytest.raises(DataError):
            zscore(np.zeros((2, 0)))


class TestGaussianNoise:
    def test_zero_variance_is_identity(self):
        x = RngState(2).normal((3, 50))
        out = add_gaussian_noise(x, 0.0, RngState(0))
        assert np.array_equal(out, x)
        assert out is not x  # still a private copy

    def test_source_not_mutated(self):
        x = RngState(3).normal((3, 50))
        before = x.copy()
        add_gaussian_noise(x, 0.1, RngState(0))
        assert np.array_equal(x, before)

    def test_million_sample_moments(self):
        x = np.zeros(1_000_000)
        noisy = add_gaussian_noise(x, 0.1, RngState(123))
        assert abs(noisy.mean()) <= 0.001
        assert abs(noisy.var() - 0.1) <= 0.002

    def test_independent_across_calls(self):
        rng = RngState(4)
        x = np.zeros(100_000)
        a = add_gaussian_noise(x, 0.1, rng)
        b = add_gaussian_noise(x, 0.1, rng)
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) <= 0.01


def make_recording(labels, channels=2, subject=3, reps=None):
    labels = np.asarray(labels)
    n = len(labels)
    signal = RngState(7).normal((channels, n))
    return Recording(signal=signal, labels=labels, subject=subject,
                     repetitions=reps)


class TestSliceWindows:
    def test_floor_division_window_count(self):
        rec = make_recording(np.ones(2600, dtype=int))
        ds = slice_windows(rec, PreprocessConfig(window=500, stride=500))
        assert len(ds) == 5

    def test_short_run_yields_nothing(self):
        # a 499-sample run contributes zero windows at W=500
        labels = np.array([1] * 499 + [2] * 600)
        rec = make_recording(labels)
        ds = slice_windows(rec, PreprocessConfig(window=500, stride=500))
        assert len(ds) == 1
        assert ds.labels.tolist() == [1]  # only the 600-sample run survives

    def test_never_crosses_label_boundary(self):
        rng = RngState(8)
        labels = np.repeat(rng.integers(4, 40) + 1, 25)  # runs of 25 samples
        rec = make_recording(labels.astype(int))
        cfg = PreprocessConfig(window=10, stride=7, include_rest=True)
        ds = slice_windows(rec, cfg)
        # reconstruct each window's span and check it is single-labeled
        spans = []
        for start, stop, label in zip(*_runs(labels)):
            for lo in range(start, stop - 10 + 1, 7):
                spans.append((lo, label))
        assert len(ds) == len(spans)
        for i, (lo, label) in enumerate(spans):
            assert ds.labels[i] == label
            assert np.array_equal(ds.windows[i],
                                  rec.signal[:, lo:lo + 10].astype(np.float32))

    def test_rest_windows_excluded_by_default(self):
        labels = np.array([0] * 600 + [2] * 600 + [0] * 600)
        rec = make_recording(labels)
        ds = slice_windows(rec, PreprocessConfig(window=500, stride=500))
        assert len(ds) == 1
        assert ds.labels[0] == 1  # gesture 2 shifts down with rest dropped
        assert ds.num_classes == 2

    def test_rest_windows_kept_on_request(self):
        labels = np.array([0] * 600 + [2] * 600)
        rec = make_recording(labels)
        ds = slice_windows(rec, PreprocessConfig(window=500, stride=500,
                                                 include_rest=True))
        assert sorted(ds.labels.tolist()) == [0, 2]
        assert ds.num_classes == 3

    def test_repetition_ids_carried(self):
        labels = np.array([1] * 500 + [1] * 500)
        reps = np.array([4] * 500 + [5] * 500)
        rec = make_recording(labels, reps=reps)
        ds = slice_windows(rec, PreprocessConfig(window=500, stride=500))
        assert ds.repetitions.tolist() == [4, 5]
        assert ds.subjects.tolist() == [3, 3]

    def test_oversized_window_warns_and_returns_empty(self):
        rec = make_recording(np.ones(100, dtype=int))
        with pytest.warns(UserWarning, match="exceeds"):
            ds = slice_windows(rec, PreprocessConfig(window=500, stride=500))
        assert len(ds) == 0


def _runs(labels):
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [len(labels)]])
    return starts, stops, labels[starts]


class TestSplits:
    def dataset(self, per_class=10, classes=3):
        return synth_generate(classes, classes, 16, per_class, RngState(5))

    def test_exact_6_2_2_when_divisible(self):
        ds = self.dataset(per_class=10)
        train, val, test = split_ratio(ds, (6, 2, 2), RngState(0))
        assert (len(train), len(val), len(test)) == (18, 6, 6)
        for cls in range(3):
            assert (train.labels == cls).sum() == 6
            assert (val.labels == cls).sum() == 2
            assert (test.labels == cls).sum() == 2

    def test_partition_disjoint_and_exhaustive(self):
        ds = self.dataset(per_class=7)
        train, val, test = split_ratio(ds, (6, 2, 2), RngState(1))
        combined = np.concatenate([train.source_indices, val.source_indices,
                                   test.source_indices])
        assert sorted(combined.tolist()) == list(range(len(ds)))
        assert len(train) + len(val) + len(test) == len(ds)

    def test_seeded_split_reproducible(self):
        ds = self.dataset()
        a = split_ratio(ds, (6, 2, 2), RngState(11))
        b = split_ratio(ds, (6, 2, 2), RngState(11))
        for x, y in zip(a, b):
            assert np.array_equal(x.source_indices, y.source_indices)

    def test_small_class_warns(self):
        ds = self.dataset(per_class=3)
        with pytest.warns(UserWarning, match="best-effort"):
            split_ratio(ds, (6, 2, 2), RngState(0))

    def test_repetition_split_ratio(self):
        ds = self.dataset(per_class=12)  # reps cycle 1..6 uniformly
        train, test = split_repetition(ds)
        assert np.all(np.isin(train.repetitions, [1, 3, 4, 6]))
        assert np.all(np.isin(test.repetitions, [2, 5]))
        assert len(train) == 2 * len(test)  # 4 reps vs 2 reps
        overlap = set(train.source_indices) & set(test.source_indices)
        assert not overlap

    def test_out_of_set_repetitions_excluded_with_warning(self):
        ds = self.dataset(per_class=12)
        ds.repetitions[ds.repetitions == 6] = 7  # DB2-style extra trials
        with pytest.warns(UserWarning, match="excluded"):
            train, test = split_repetition(ds)
        assert 7 not in train.repetitions and 7 not in test.repetitions

    def test_empty_side_is_error(self):
        ds = self.dataset()
        with pytest.raises(DataError):
            split_repetition(ds, train_reps=(1, 2, 3, 4, 5, 6), test_reps=(9,))


class TestSynthetic:
    def test_energy_classifier_is_perfect_at_zero_noise(self):
        K = 4
        ds = synth_generate(K, 8, 64, 6, RngState(9), noise_std=0.0)
        energy = (ds.windows.astype(np.float64) ** 2).mean(axis=2)  # [N, C]
        hits = 0
        for i in range(len(ds)):
            scores = [energy[i, k::K].mean() for k in range(K)]
            hits += int(np.argmax(scores) == ds.labels[i])
        assert hits == len(ds)

    def test_label_histogram_exactly_uniform(self):
        ds = synth_generate(5, 6, 32, 9, RngState(10))
        counts = np.bincount(ds.labels, minlength=5)
        assert counts.tolist() == [9] * 5

    def test_fixed_seed_identical_bytes(self, tmp_path):
        a = synth_generate(3, 4, 20, 5, RngState(21))
        b = synth_generate(3, 4, 20, 5, RngState(21))
        pa, pb = tmp_path / "a.emgb", tmp_path / "b.emgb"
        save_emgb(a, pa)
        save_emgb(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_augmentation_preserves_labels_and_sources(self):
        ds = synth_generate(3, 4, 20, 5, RngState(22))
        before = ds.windows.copy()
        bigger = augment_with_noise(ds, 2, 0.1, RngState(0))
        assert len(bigger) == 3 * len(ds)
        assert np.array_equal(bigger.labels, np.tile(ds.labels, 3))
        assert np.array_equal(ds.windows, before)  # source untouched


class TestEmgb:
    def test_round_trip_byte_identical(self, tmp_path):
        ds = synth_generate(4, 5, 24, 6, RngState(30))
        p1, p2 = tmp_path / "a.emgb", tmp_path / "b.emgb"
        save_emgb(ds, p1)
        loaded = load_emgb(p1)
        save_emgb(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.windows, ds.windows)
        assert np.array_equal(loaded.labels, ds.labels)
        assert np.array_equal(loaded.repetitions, ds.repetitions)

    def test_empty_dataset_round_trips(self, tmp_path):
        ds = synth_generate(3, 4, 8, 2, RngState(0)).subset(np.array([], dtype=int))
        path = tmp_path / "empty.emgb"
        save_emgb(ds, path)
        loaded = load_emgb(path)
        assert len(loaded) == 0
        assert loaded.num_classes == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.emgb"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(DataError, match="bad magic"):
            load_emgb(path)

    def test_truncation_names_byte_counts(self, tmp_path):
        ds = synth_generate(3, 4, 8, 2, RngState(1))
        path = tmp_path / "t.emgb"
        save_emgb(ds, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(DataError, match=rf"expected {len(blob)} bytes, "
                                            rf"found {len(blob) - 10}"):
            load_emgb(path)

    def test_label_out_of_declared_range(self, tmp_path):
        ds = synth_generate(3, 4, 8, 2, RngState(2))
        path = tmp_path / "l.emgb"
        save_emgb(ds, path)
        blob = bytearray(path.read_bytes())
        blob[24] = 250  # first record's label little-endian low byte
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="label"):
            load_emgb(path)
