"""Converter acceptance: handcrafted fixtures in both MAT flavors, byte-layout
verification against the EMGB spec, and validation through the consumer."""

import struct

import numpy as np
import pytest
from scipy.io import savemat

from matconv import (ConvertError, convert, read_recording, segment_windows,
                     standardize)
from matconv.convert import main


def build_fixture(path, channels=2, v73=False):
    """Two gestures with stimulus/restimulus disagreeing on run lengths:

    stimulus:    rest(50) g1(120) rest(50) g2(240) rest(40)
    restimulus:  rest(80) g1(90)  rest(50) g2(240) rest(40)

    At window=100 the refined g1 run (90 samples) vanishes, so the two label
    fields yield different window counts (3 vs 2).
    """
    total = 500
    rng = np.random.default_rng(42)
    emg = rng.normal(size=(total, channels)) * 1e-4  # mat units, small floats
    stimulus = np.concatenate([np.zeros(50), np.ones(120), np.zeros(50),
                               np.full(240, 2), np.zeros(40)]).astype(np.int16)
    restimulus = np.concatenate([np.zeros(80), np.ones(90), np.zeros(50),
                                 np.full(240, 2), np.zeros(40)]).astype(np.int16)
    repetition = np.concatenate([np.zeros(50), np.full(120, 1), np.zeros(50),
                                 np.full(240, 3), np.zeros(40)]).astype(np.int16)
    doc = {"emg": emg, "stimulus": stimulus[:, None],
           "restimulus": restimulus[:, None],
           "repetition": repetition[:, None],
           "rerepetition": repetition[:, None],
           "subject": np.array([[7]], dtype=np.int16)}
    if v73:
        import h5py
        with h5py.File(path, "w") as f:
            for key, value in doc.items():
                f.create_dataset(key, data=np.atleast_2d(value).T)
    else:
        savemat(path, doc)
    return emg


class TestReading:
    def test_classic_mat(self, tmp_path):
        src = tmp_path / "rec.mat"
        emg = build_fixture(src)
        view = read_recording(src)
        assert view.emg.shape == (500, 2)
        assert np.allclose(view.emg, emg)
        assert view.subject == 7

    def test_v73_hdf5(self, tmp_path):
        src = tmp_path / "rec73.mat"
        emg = build_fixture(src, v73=True)
        view = read_recording(src)
        assert view.emg.shape == (500, 2)
        assert np.allclose(view.emg, emg)

    def test_missing_variable_lists_available_keys(self, tmp_path):
        src = tmp_path / "weird.mat"
        savemat(src, {"signal": np.zeros((10, 2)), "marks": np.zeros(10)})
        with pytest.raises(ConvertError, match="available keys.*marks"):
            read_recording(src)

    def test_unusual_channel_count_warns_but_proceeds(self, tmp_path):
        src = tmp_path / "rec.mat"
        build_fixture(src, channels=2)
        with pytest.warns(UserWarning, match="unusual"):
            view = read_recording(src)
        assert view.emg.shape[1] == 2

    def test_unknown_label_field_rejected(self, tmp_path):
        src = tmp_path / "rec.mat"
        build_fixture(src)
        with pytest.raises(ConvertError, match="label field"):
            read_recording(src, label_field="glove")


class TestSegmentation:
    def test_label_field_changes_window_count(self, tmp_path):
        src = tmp_path / "rec.mat"
        build_fixture(src)
        by_stimulus = list(segment_windows(
            read_recording(src, label_field="stimulus"), 100, 100))
        by_restimulus = list(segment_windows(
            read_recording(src, label_field="restimulus"), 100, 100))
        assert len(by_stimulus) == 3    # g1: 1 window, g2: 2 windows
        assert len(by_restimulus) == 2  # refined g1 run too short

    def test_labels_shift_down_without_rest(self, tmp_path):
        src = tmp_path / "rec.mat"
        build_fixture(src)
        windows = list(segment_windows(read_recording(src), 100, 100))
        assert sorted({label for _, label, _ in windows}) == [1]  # gesture 2
        # at W=50 the 80-sample rest run fits, so class 0 appears when kept
        rest_in = list(segment_windows(read_recording(src), 50, 50,
                                       include_rest=True))
        assert {label for _, label, _ in rest_in} == {0, 1, 2}

    def test_repetitions_follow_runs(self, tmp_path):
        src = tmp_path / "rec.mat"
        build_fixture(src)
        windows = list(segment_windows(
            read_recording(src, label_field="stimulus"), 100, 100))
        reps = [rep for _, _, rep in windows]
        assert reps == [1, 3, 3]

    def test_standardize_before_slicing(self, tmp_path):
        src = tmp_path / "rec.mat"
        build_fixture(src)
        view = standardize(read_recording(src))
        assert np.max(np.abs(view.emg.mean(axis=0))) <= 1e-10
        assert np.max(np.abs(view.emg.std(axis=0) - 1.0)) <= 1e-10


class TestEmgbOutput:
    def test_byte_layout_matches_format_spec(self, tmp_path):
        src, dst = tmp_path / "rec.mat", tmp_path / "rec.emgb"
        emg = build_fixture(src)
        summary = convert(src, dst, label_field="stimulus", window=100,
                          stride=100)
        assert summary == {"windows": 3, "classes": 2, "channels": 2,
                           "window": 100, "subject": 7}
        blob = dst.read_bytes()
        magic, version, n, C, W, K = struct.unpack_from("<4sIIIII", blob, 0)
        assert (magic, version, n, C, W, K) == (b"EMG1", 1, 3, 2, 100, 2)
        # first record: g1 starts at sample 50, label shifts 1 -> 0, rep 1
        label, subject, rep, reserved = struct.unpack_from("<HHHH", blob, 24)
        assert (label, subject, rep, reserved) == (0, 7, 1, 0)
        samples = np.frombuffer(blob, dtype="<f4", count=200, offset=32)
        expected = emg[50:150].T.astype(np.float32)  # channel-major
        assert np.array_equal(samples.reshape(2, 100), expected)
        assert len(blob) == 24 + 3 * (8 + 200 * 4)

    def test_consumer_validates_and_agrees(self, tmp_path):
        # the EMGB must load through the downstream toolkit unchanged
        tristream = pytest.importorskip("tristream")
        src, dst = tmp_path / "rec.mat", tmp_path / "rec.emgb"
        emg = build_fixture(src)
        summary = convert(src, dst, label_field="stimulus", window=100,
                          stride=100)
        ds = tristream.load_emgb(dst)
        assert len(ds) == summary["windows"]
        assert ds.windows.shape == (3, 2, 100)
        assert ds.num_classes == 2
        assert ds.subjects.tolist() == [7, 7, 7]
        # float32 rounding is the only loss relative to the source
        assert np.array_equal(ds.windows[0], emg[50:150].T.astype(np.float32))
        assert np.max(np.abs(ds.windows[0] - emg[50:150].T)) <= 1e-10

    def test_cli_end_to_end(self, tmp_path, capsys):
        src, dst = tmp_path / "rec.mat", tmp_path / "rec.emgb"
        build_fixture(src)
        code = main([str(src), str(dst), "--label-field", "stimulus",
                     "--window", "100", "--stride", "100", "--fs", "2000"])
        assert code == 0
        out = capsys.readouterr().out
        assert "windows=3" in out and "channels=2" in out
        assert "seconds_per_window=0.05" in out

    def test_cli_missing_input_is_exit_2(self, tmp_path, capsys):
        code = main([str(tmp_path / "nope.mat"), str(tmp_path / "out.emgb")])
        assert code == 2
        assert "nope.mat" in capsys.readouterr().err
