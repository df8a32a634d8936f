"""Convert Ninapro-style .mat recordings (DB2/DB4/DB5 layouts) into the
portable EMGB container.

Reads both classic MAT-files (scipy.io) and v7.3/HDF5 containers (h5py);
variable names are probed from a documented candidate list because naming
drifts across Ninapro releases.  Windowing mirrors the downstream toolkit's
rule: fixed-length windows cut from maximal same-label runs, remainders
dropped, rest segments (label 0) skipped.

The EMGB layout written here (and the only coupling to the consumer):
  magic "EMG1" | u32 LE {version=1, N, C, W, K}
  N records: u16 {label, subject, repetition, reserved=0} + C*W float32 LE
  samples, channel-major.
"""

from __future__ import annotations

import argparse
import struct
import sys
import warnings
from dataclasses import dataclass

import numpy as np

EMGB_MAGIC = b"EMG1"
_HEADER = struct.Struct("<4sIIIII")
_RECORD_META = struct.Struct("<HHHH")

# candidate variable names per field, first hit wins
EMG_KEYS = ("emg", "EMG", "data")
LABEL_KEYS = {"restimulus": ("restimulus", "re_stimulus"),
              "stimulus": ("stimulus", "glove_stimulus")}
REPETITION_KEYS = {"restimulus": ("rerepetition", "re_repetition", "repetition"),
                   "stimulus": ("repetition", "rerepetition")}
SUBJECT_KEYS = ("subject", "subj")

EXPECTED_CHANNELS = (12, 16)


class ConvertError(ValueError):
    """Unreadable container or missing variables."""


@dataclass
class MatRecordingView:
    """A normalized view of one recording: emg [samples, channels] plus
    per-sample label and repetition vectors and the subject id."""

    emg: np.ndarray
    labels: np.ndarray
    repetitions: np.ndarray
    subject: int

    def __post_init__(self):
        n = self.emg.shape[0]
        if self.labels.shape != (n,) or self.repetitions.shape != (n,):
            raise ConvertError(
                f"vector lengths (labels {self.labels.shape}, repetitions "
                f"{self.repetitions.shape}) do not match {n} emg samples")


def _load_variables(path) -> dict[str, np.ndarray]:
    """All top-level numeric variables, from either MAT container flavor."""
    import h5py
    with open(path, "rb"):
        pass  # surface FileNotFoundError before format probing
    if h5py.is_hdf5(path):  # v7.3 (and plain HDF5) containers
        out = {}
        with h5py.File(path, "r") as f:
            for key, node in f.items():
                if isinstance(node, h5py.Dataset):
                    # MATLAB is column-major; h5py exposes the transpose
                    out[key] = np.asarray(node).T
        return out
    try:
        from scipy.io import loadmat
        raw = loadmat(path)
    except Exception as exc:
        raise ConvertError(f"unreadable mat container {path}: {exc}") from exc
    return {k: np.asarray(v) for k, v in raw.items() if not k.startswith("__")}


def _pick(variables: dict, candidates: tuple[str, ...], what: str) -> np.ndarray:
    for key in candidates:
        if key in variables:
            return variables[key]
    raise ConvertError(f"no {what} variable found (tried {list(candidates)}); "
                       f"available keys: {sorted(variables)}")


def read_recording(path, label_field: str = "restimulus",
                   subject: int | None = None) -> MatRecordingView:
    """Normalize a Ninapro .mat file to samples-major arrays."""
    if label_field not in LABEL_KEYS:
        raise ConvertError(f"label field must be one of {sorted(LABEL_KEYS)}, "
                           f"got {label_field!r}")
    variables = _load_variables(path)
    emg = np.asarray(_pick(variables, EMG_KEYS, "emg"), dtype=np.float64)
    if emg.ndim != 2:
        raise ConvertError(f"emg must be 2-D, got shape {emg.shape}")
    if emg.shape[0] < emg.shape[1]:
        # heuristically samples-major; a recording always outlasts its channels
        emg = emg.T
    labels = _pick(variables, LABEL_KEYS[label_field], label_field)
    labels = np.asarray(labels).ravel().astype(np.int64)
    reps = _pick(variables, REPETITION_KEYS[label_field], "repetition")
    reps = np.asarray(reps).ravel().astype(np.int64)
    if subject is None:
        subject = 0
        for key in SUBJECT_KEYS:
            if key in variables:
                subject = int(np.asarray(variables[key]).ravel()[0])
                break
    if emg.shape[1] not in EXPECTED_CHANNELS:
        warnings.warn(f"{emg.shape[1]} channels is unusual for Ninapro "
                      f"(expected one of {EXPECTED_CHANNELS}); proceeding")
    return MatRecordingView(emg=emg, labels=labels, repetitions=reps,
                            subject=int(subject))


def standardize(view: MatRecordingView, epsilon: float = 1e-8) -> MatRecordingView:
    """Per-channel z-score over the whole recording (population std), applied
    before slicing; constant channels map to zeros via the epsilon guard."""
    emg = view.emg
    mean = emg.mean(axis=0, keepdims=True)
    std = emg.std(axis=0, keepdims=True)
    return MatRecordingView(emg=(emg - mean) / np.maximum(std, epsilon),
                            labels=view.labels, repetitions=view.repetitions,
                            subject=view.subject)


def segment_windows(view: MatRecordingView, window: int, stride: int,
                    include_rest: bool = False):
    """Fixed-length windows from maximal same-label runs (remainders drop).

    Yields (window [C, W] float32, label, repetition).  With rest excluded,
    gesture ids shift down by one so classes are contiguous from zero.
    """
    labels = view.labels
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [len(labels)]])
    emg_cm = view.emg.T  # channel-major
    for start, stop in zip(starts, stops):
        label = int(labels[start])
        if label == 0 and not include_rest:
            continue
        for lo in range(int(start), int(stop) - window + 1, stride):
            out_label = label if include_rest else label - 1
            yield (emg_cm[:, lo:lo + window].astype(np.float32), out_label,
                   int(view.repetitions[lo]))


def write_emgb(records, num_classes: int, channels: int, window: int,
               subject: int, out_path) -> int:
    """Serialize (window, label, repetition) triples; returns the count."""
    count = 0
    with open(out_path, "wb") as f:
        f.write(_HEADER.pack(EMGB_MAGIC, 1, 0, channels, window, num_classes))
        for win, label, rep in records:
            f.write(_RECORD_META.pack(label, subject, rep, 0))
            f.write(np.ascontiguousarray(win, dtype="<f4").tobytes())
            count += 1
        f.seek(8)
        f.write(struct.pack("<I", count))  # patch N now that it is known
    return count


def convert(in_path, out_path, label_field: str = "restimulus",
            subject: int | None = None, window: int = 500, stride: int = 500,
            include_rest: bool = False, fs: float | None = None,
            zscore: bool = False) -> dict:
    """Full conversion; returns the summary {windows, classes, channels,
    window, subject, seconds_per_window?}."""
    view = read_recording(in_path, label_field=label_field, subject=subject)
    if zscore:
        view = standardize(view)
    max_gesture = int(view.labels.max(initial=0))
    num_classes = max_gesture + 1 if include_rest else max(max_gesture, 1)
    count = write_emgb(segment_windows(view, window, stride, include_rest),
                       num_classes, view.emg.shape[1], window,
                       view.subject, out_path)
    summary = {"windows": count, "classes": num_classes,
               "channels": view.emg.shape[1], "window": window,
               "subject": view.subject}
    if fs:
        summary["seconds_per_window"] = window / fs
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="matconv",
        description="Convert a Ninapro .mat recording to an EMGB dataset.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("input", help="source .mat file (classic or v7.3)")
    parser.add_argument("output", help="destination .emgb file")
    parser.add_argument("--label-field", choices=sorted(LABEL_KEYS),
                        default="restimulus", dest="label_field",
                        help="label variable to segment by")
    parser.add_argument("--subject", type=int, default=None,
                        help="subject id override (default: probe the file)")
    parser.add_argument("--window", type=int, default=500,
                        help="window length in samples")
    parser.add_argument("--stride", type=int, default=500,
                        help="stride between windows")
    parser.add_argument("--include-rest", action="store_true",
                        dest="include_rest",
                        help="keep rest segments as class 0")
    parser.add_argument("--zscore", action="store_true",
                        help="per-channel standardization before slicing")
    parser.add_argument("--fs", type=float, default=None,
                        help="sampling rate in Hz (summary metadata only)")
    args = parser.parse_args(argv)
    try:
        summary = convert(args.input, args.output,
                          label_field=args.label_field, subject=args.subject,
                          window=args.window, stride=args.stride,
                          include_rest=args.include_rest, fs=args.fs,
                          zscore=args.zscore)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except ConvertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
