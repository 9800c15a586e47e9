import logging
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Sequence

import numpy as np

from .data import DatasetSpec, RawRecording
from .errors import ShapeError

logger = logging.getLogger(__name__)


class WindowedSample(NamedTuple):
    x: np.ndarray  # (w, c)
    y: int
    s: int


@dataclass
class WindowSet:
    """Columnar storage for a list of windows: ``x`` (n, w, c), ``y`` (n,), ``s`` (n,)."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        if self.x.ndim != 3:
            raise ShapeError(f"window tensor must be (n, w, c), got {self.x.shape}")
        if not (len(self.x) == len(self.y) == len(self.s)):
            raise ShapeError("x, y and s must have the same length")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> WindowedSample:
        return WindowedSample(self.x[i], int(self.y[i]), int(self.s[i]))

    @property
    def window_size(self) -> int:
        return self.x.shape[1]

    @property
    def n_channels(self) -> int:
        return self.x.shape[2]

    @property
    def subjects(self) -> List[int]:
        return sorted(set(self.s.tolist()))

    def subset(self, mask_or_idx) -> "WindowSet":
        return WindowSet(self.x[mask_or_idx], self.y[mask_or_idx], self.s[mask_or_idx])

    def for_subjects(self, subjects: Iterable[int]) -> "WindowSet":
        return self.subset(np.isin(self.s, list(subjects)))

    @classmethod
    def empty(cls, w: int, c: int) -> "WindowSet":
        return cls(np.zeros((0, w, c), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([p.x for p in parts]),
                   np.concatenate([p.y for p in parts]),
                   np.concatenate([p.s for p in parts]))


@dataclass
class ScalerParams:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != self.max.shape:
            raise ShapeError("min/max length mismatch")
        if np.any(self.max < self.min):
            raise ValueError("scaler max must be >= min for every channel")


@dataclass
class FoldSpec:
    test_subject: int
    val_subjects: List[int]
    train_subjects: List[int]
    seed: int

    def __post_init__(self):
        test, val, train = {self.test_subject}, set(self.val_subjects), set(self.train_subjects)
        if test & val or test & train or val & train:
            raise ValueError("fold subject sets must be pairwise disjoint")

    def to_dict(self):
        return {"test_subject": self.test_subject, "val_subjects": list(self.val_subjects),
                "train_subjects": list(self.train_subjects), "seed": self.seed}


@dataclass
class FoldData:
    fold: FoldSpec
    train: WindowSet
    val: WindowSet
    test: WindowSet
    scaler: ScalerParams
    n_classes: int
    class_labels: List[int] = field(default_factory=list)


def window_starts(n_samples: int, window_size: int, stride: int) -> np.ndarray:
    if n_samples < window_size:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_samples - window_size + 1, stride, dtype=np.int64)


def segment_windows(recording: RawRecording, spec: DatasetSpec) -> WindowSet:
    """Slide a window over one recording, keeping single-label non-null windows."""
    w = spec.window_size
    c = recording.n_channels
    starts = window_starts(len(recording), w, spec.stride)
    if len(starts) == 0:
        return WindowSet.empty(w, c)
    label_windows = np.lib.stride_tricks.sliding_window_view(recording.labels, w)[starts]
    first = label_windows[:, 0]
    uniform = (label_windows == first[:, None]).all(axis=1)
    mapping = spec.label_to_index
    known = np.isin(first, list(mapping))
    keep = uniform & known & (first != 0)
    kept = starts[keep]
    idx = kept[:, None] + np.arange(w)[None, :]
    x = recording.channels[idx]
    y = np.array([mapping[int(v)] for v in first[keep]], dtype=np.int64)
    s = np.full(len(kept), recording.subject_id, dtype=np.int64)
    return WindowSet(x, y, s)


def segment_all(recordings: Sequence[RawRecording], spec: DatasetSpec) -> WindowSet:
    parts = [segment_windows(r, spec) for r in recordings]
    ws = WindowSet.concat(parts)
    logger.info("%s: %d windows from %d recordings", spec.name, len(ws), len(recordings))
    return ws


def fit_minmax(train_windows: WindowSet) -> ScalerParams:
    if len(train_windows) == 0:
        raise ValueError("cannot fit min-max scaling on an empty window set")
    x = train_windows.x
    return ScalerParams(x.min(axis=(0, 1)).astype(np.float64), x.max(axis=(0, 1)).astype(np.float64))


def apply_minmax(windows: WindowSet, params: ScalerParams) -> WindowSet:
    """Map each channel affinely so the train range becomes [0, 1].

    Values outside the fitted range are not clipped. Constant channels map to 0.
    """
    if windows.n_channels != params.min.shape[0]:
        raise ShapeError(f"window set has {windows.n_channels} channels, scaler has {params.min.shape[0]}")
    span = params.max - params.min
    safe = np.where(span > 0, span, 1.0)
    scaled = (windows.x.astype(np.float64) - params.min) / safe
    scaled[..., span == 0] = 0.0
    return WindowSet(scaled, windows.y.copy(), windows.s.copy())


def loso_splits(subjects, n_val: int = 2, seed: int = 0) -> List[FoldSpec]:
    subjects = sorted(set(int(s) for s in subjects))
    if len(subjects) < n_val + 2:
        raise ValueError(f"LOSO with {n_val} validation subjects needs at least {n_val + 2} subjects")
    folds = []
    for test in subjects:
        rest = [s for s in subjects if s != test]
        rng = np.random.default_rng([seed, test])
        val = sorted(int(v) for v in rng.choice(rest, size=n_val, replace=False))
        train = [s for s in rest if s not in val]
        folds.append(FoldSpec(test, val, train, seed))
    return folds


def prepare_fold(windows: WindowSet, fold: FoldSpec, n_classes: int, class_labels=None) -> FoldData:
    """Split windows by subject for one fold and normalise with train-only statistics."""
    train = windows.for_subjects(fold.train_subjects)
    val = windows.for_subjects(fold.val_subjects)
    test = windows.for_subjects([fold.test_subject])
    if len(train) == 0:
        raise ValueError(f"fold with test subject {fold.test_subject} has no training windows")
    if len(test) == 0:
        raise ValueError(f"test subject {fold.test_subject} has no windows")
    scaler = fit_minmax(train)
    data = FoldData(fold, apply_minmax(train, scaler), apply_minmax(val, scaler),
                    apply_minmax(test, scaler), scaler, n_classes, list(class_labels or []))
    assert_fold_isolation(data)
    return data


def assert_fold_isolation(data: FoldData) -> None:
    test_subject = data.fold.test_subject
    if np.any(data.train.s == test_subject) or np.any(data.val.s == test_subject):
        raise AssertionError(f"test subject {test_subject} leaked into train/validation windows")
    if set(data.train.s.tolist()) & set(data.val.s.tolist()):
        raise AssertionError("train and validation subjects overlap")
