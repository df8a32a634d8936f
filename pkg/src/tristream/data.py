"""Dataset ingestion, preprocessing, splitting, synthetic generation, and the
portable EMGB container.

Pipeline order matters and is fixed: standardize the recording, slice it into
fixed-length single-gesture windows, split into train/val/test, and only then
augment the training split.  Augmenting earlier would leak noise-correlated
copies of one window across splits.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rng import RngState

EMGB_MAGIC = b"EMG1"
_HEADER = struct.Struct("<4sIIIII")   # magic, version, N, C, W, K
_RECORD_META = struct.Struct("<HHHH")  # label, subject, repetition, reserved


@dataclass
class Recording:
    """A continuous multichannel recording with per-sample annotations.

    signal is [C, N]; labels / repetitions run parallel to the sample axis
    (label 0 means rest).
    """

    signal: np.ndarray
    labels: np.ndarray
    subject: int = 0
    repetitions: np.ndarray | None = None

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signal.ndim != 2:
            raise DataError(f"signal must be [C, N], got shape {self.signal.shape}")
        if self.labels.shape != (self.signal.shape[1],):
            raise DataError(f"label stream length {self.labels.shape} does not "
                            f"match {self.signal.shape[1]} samples")
        if self.repetitions is None:
            self.repetitions = np.zeros_like(self.labels)
        else:
            self.repetitions = np.asarray(self.repetitions, dtype=np.int64)
            if self.repetitions.shape != self.labels.shape:
                raise DataError("repetition stream length does not match samples")


@dataclass
class WindowedDataset:
    """Fixed-length labeled windows: windows [N, C, W] float32, one label,
    subject id and repetition id per window."""

    windows: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    repetitions: np.ndarray
    num_classes: int
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.repetitions = np.asarray(self.repetitions, dtype=np.int64)
        n = len(self.windows)
        if self.windows.ndim != 3 and n > 0:
            raise DataError(f"windows must be [N, C, W], got {self.windows.shape}")
        for name, arr in (("labels", self.labels), ("subjects", self.subjects),
                          ("repetitions", self.repetitions)):
            if arr.shape != (n,):
                raise DataError(f"{name} length {arr.shape} != {n} windows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.source_indices is None:
            self.source_indices = np.arange(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, idx: np.ndarray) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowedDataset(self.windows[idx], self.labels[idx],
                               self.subjects[idx], self.repetitions[idx],
                               self.num_classes, self.source_indices[idx])


@dataclass
class PreprocessConfig:
    window: int = 500
    stride: int = 500
    noise_variance: float = 0.1
    augment_multiplier: int = 0
    epsilon: float = 1e-8
    include_rest: bool = False
    split_kind: str = "ratio"              # "ratio" or "repetition"
    ratios: tuple[int, int, int] = (6, 2, 2)
    train_reps: tuple[int, ...] = (1, 3, 4, 6)
    test_reps: tuple[int, ...] = (2, 5)

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise DataError("window and stride must be positive")
        if self.noise_variance < 0:
            raise DataError("noise variance must be non-negative")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def zscore(x: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Per-channel standardization (x - mean) / max(std, epsilon).

    Population std.  Constant channels map to zeros through the epsilon
    guard rather than raising.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DataError(f"zscore expects [C, T] with T >= 1, got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    return (x - mean) / np.maximum(std, epsilon)


def add_gaussian_noise(x: np.ndarray, variance: float, rng: RngState) -> np.ndarray:
    """x + n with n ~ Normal(0, variance) i.i.d.; the input is not mutated."""
    x = np.asarray(x, dtype=np.float64)
    if variance < 0:
        raise DataError("noise variance must be non-negative")
    if variance == 0.0:
        return x.copy()
    return x + rng.normal(x.shape, std=float(np.sqrt(variance)))


def _label_runs(labels: np.ndarray):
    """Maximal same-label runs as (start, stop, label) triples."""
    if len(labels) == 0:
        return
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [len(labels)]])
    for start, stop in zip(starts, stops):
        yield int(start), int(stop), int(labels[start])


def slice_windows(rec: Recording, cfg: PreprocessConfig) -> WindowedDataset:
    """Cut fixed-length windows from maximal same-label runs.

    A run shorter than the window contributes nothing; leftover samples at a
    run's tail are dropped.  Rest segments (label 0) are skipped unless
    `include_rest`, in which case they keep class id 0.  With rest excluded,
    gesture ids shift down by one so classes stay in [0, K).
    """
    W, stride = cfg.window, cfg.stride
    if W > rec.signal.shape[1]:
        warnings.warn(f"window {W} exceeds recording length "
                      f"{rec.signal.shape[1]}; empty dataset")
    windows, labels, reps = [], [], []
    for start, stop, label in _label_runs(rec.labels):
        if label == 0 and not cfg.include_rest:
            continue
        for lo in range(start, stop - W + 1, stride):
            windows.append(rec.signal[:, lo:lo + W])
            labels.append(label if cfg.include_rest else label - 1)
            reps.append(int(rec.repetitions[lo]))
    max_gesture = int(rec.labels.max(initial=0))
    num_classes = max_gesture + 1 if cfg.include_rest else max(max_gesture, 1)
    n = len(windows)
    return WindowedDataset(
        windows=np.asarray(windows, dtype=np.float32).reshape(
            n, rec.signal.shape[0], W),
        labels=np.asarray(labels, dtype=np.int64),
        subjects=np.full(n, rec.subject, dtype=np.int64),
        repetitions=np.asarray(reps, dtype=np.int64),
        num_classes=num_classes)


def augment_with_noise(ds: WindowedDataset, multiplier: int, variance: float,
                       rng: RngState) -> WindowedDataset:
    """Append `multiplier` noisy copies of every window (labels preserved)."""
    if multiplier <= 0:
        return ds
    parts_w = [ds.windows]
    for _ in range(multiplier):
        noisy = add_gaussian_noise(ds.windows.astype(np.float64), variance, rng)
        parts_w.append(noisy.astype(np.float32))
    reps = multiplier + 1
    return WindowedDataset(
        windows=np.concatenate(parts_w, axis=0),
        labels=np.tile(ds.labels, reps),
        subjects=np.tile(ds.subjects, reps),
        repetitions=np.tile(ds.repetitions, reps),
        num_classes=ds.num_classes,
        source_indices=np.tile(ds.source_indices, reps))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_ratio(ds: WindowedDataset, ratios: tuple[int, int, int], rng: RngState
                ) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Stratified train/val/test split; disjoint, exhaustive, seed-stable.

    Within each class the shuffled windows are apportioned by largest
    remainder so the piece sizes track the ratios exactly when they divide
    evenly (10 windows at 6:2:2 -> 6/2/2).
    """
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    total = sum(ratios)
    train_idx, val_idx, test_idx = [], [], []
    for cls in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == cls)
        if len(members) == 0:
            continue
        if len(members) < 5:
            warnings.warn(f"class {cls} has only {len(members)} windows; "
                          "ratio split is best-effort")
        members = members[rng.permutation(len(members))]
        n = len(members)
        exact = [n * r / total for r in ratios]
        counts = [int(e) for e in exact]
        remainders = sorted(range(3), key=lambda i: exact[i] - counts[i], reverse=True)
        for i in remainders:
            if sum(counts) == n:
                break
            counts[i] += 1
        a, b = counts[0], counts[0] + counts[1]
        train_idx.extend(members[:a])
        val_idx.extend(members[a:b])
        test_idx.extend(members[b:])
    return (ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx)),
            ds.subset(np.sort(test_idx)))


def split_repetition(ds: WindowedDataset,
                     train_reps: tuple[int, ...] = (1, 3, 4, 6),
                     test_reps: tuple[int, ...] = (2, 5)
                     ) -> tuple[WindowedDataset, WindowedDataset]:
    """Partition purely by repetition id; ids outside both sets are dropped
    with a warning.  An empty side is an error."""
    train_set, test_set = set(train_reps), set(test_reps)
    if train_set & test_set:
        raise DataError(f"repetition sets overlap: {sorted(train_set & test_set)}")
    in_train = np.isin(ds.repetitions, list(train_set))
    in_test = np.isin(ds.repetitions, list(test_set))
    dropped = int((~in_train & ~in_test).sum())
    if dropped:
        warnings.warn(f"{dropped} windows with repetitions outside "
                      f"{sorted(train_set | test_set)} were excluded")
    train = ds.subset(np.flatnonzero(in_train))
    test = ds.subset(np.flatnonzero(in_test))
    if len(train) == 0 or len(test) == 0:
        raise DataError("repetition split produced an empty side "
                        f"(train={len(train)}, test={len(test)})")
    return train, test


# ---------------------------------------------------------------------------
# synthetic oracle
# ---------------------------------------------------------------------------


def synth_generate(num_classes: int, channels: int, window: int, per_class: int,
                   rng: RngState, noise_std: float = 0.1) -> WindowedDataset:
    """Separable synthetic gestures with a documented generative law.

    Class k oscillates at k+2 cycles per window on its own channel group
    (channels c with c % num_classes == k), with a random phase per window
    and additive Gaussian noise everywhere.  Distinct channel groups make the
    classes linearly separable by per-channel energy, so Bayes accuracy is 1
    at the default noise level.  Repetition ids cycle 1..6.
    """
    if num_classes < 2:
        raise DataError(f"need at least 2 classes, got {num_classes}")
    if channels < num_classes:
        raise DataError(f"need at least {num_classes} channels for "
                        f"{num_classes} distinct channel groups")
    t = np.arange(window, dtype=np.float64) / window
    windows = np.empty((num_classes * per_class, channels, window), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for i, label in enumerate(labels):
        x = noise_std * rng.normal((channels, window)) if noise_std > 0 \
            else np.zeros((channels, window))
        freq = label + 2
        for c in range(int(label), channels, num_classes):
            phase = 2.0 * np.pi * rng.uniform()
            x[c] += np.sin(2.0 * np.pi * freq * t + phase)
        windows[i] = x.astype(np.float32)
    n = len(labels)
    return WindowedDataset(
        windows=windows, labels=labels,
        subjects=np.zeros(n, dtype=np.int64),
        repetitions=(np.arange(n, dtype=np.int64) % 6) + 1,
        num_classes=num_classes)


# ---------------------------------------------------------------------------
# EMGB container
# ---------------------------------------------------------------------------


def save_emgb(ds: WindowedDataset, path) -> None:
    """EMG1 container: header {version, N, C, W, K} then per-window records
    of {label, subject, repetition, reserved} u16 metadata and channel-major
    float32 LE samples."""
    n = len(ds)
    C = ds.windows.shape[1] if n else 0
    W = ds.windows.shape[2] if n else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMGB_MAGIC, 1, n, C, W, ds.num_classes))
        for i in range(n):
            f.write(_RECORD_META.pack(int(ds.labels[i]), int(ds.subjects[i]),
                                      int(ds.repetitions[i]), 0))
            f.write(ds.windows[i].astype("<f4").tobytes())


def load_emgb(path) -> WindowedDataset:
    """Strict EMGB reader: bad magic, truncation (with expected vs actual
    byte counts), and out-of-range labels are DataErrors."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"truncated EMGB header: expected {_HEADER.size} bytes, "
                        f"found {len(raw)}")
    magic, version, n, C, W, K = _HEADER.unpack_from(raw, 0)
    if magic != EMGB_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {EMGB_MAGIC!r}")
    if version != 1:
        raise DataError(f"unsupported EMGB version {version}")
    record = _RECORD_META.size + C * W * 4
    expected = _HEADER.size + n * record
    if len(raw) != expected:
        raise DataError(f"truncated EMGB payload: expected {expected} bytes, "
                        f"found {len(raw)}")
    windows = np.empty((n, C, W), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    subjects = np.empty(n, dtype=np.int64)
    reps = np.empty(n, dtype=np.int64)
    offset = _HEADER.size
    for i in range(n):
        label, subject, rep, _ = _RECORD_META.unpack_from(raw, offset)
        if label >= K:
            raise DataError(f"window {i} label {label} >= {K} declared classes")
        labels[i], subjects[i], reps[i] = label, subject, rep
        offset += _RECORD_META.size
        windows[i] = np.frombuffer(raw, dtype="<f4", count=C * W,
                                   offset=offset).reshape(C, W)
        offset += C * W * 4
    return WindowedDataset(windows=windows, labels=labels, subjects=subjects,
                           repetitions=reps, num_classes=K)
