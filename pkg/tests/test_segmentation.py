import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harpair.data import DatasetSpec, RawRecording
from harpair.errors import ShapeError
from harpair.segmentation import (
    FoldSpec,
    WindowSet,
    apply_minmax,
    fit_minmax,
    loso_splits,
    prepare_fold,
    segment_windows,
    window_starts,
)


def _spec(w, overlap=0.5, labels=(1, 2, 3)):
    return DatasetSpec("SYNTHETIC", [1], list(labels), w, overlap)


def _rec(labels, c=2, subject=1):
    labels = np.asarray(labels)
    ch = np.arange(len(labels) * c, dtype=float).reshape(len(labels), c)
    return RawRecording(subject, ch, labels, 50.0, [f"ch{i}" for i in range(c)])


def _naive_windows(labels, w, stride, null=0):
    """Oracle: loop over every start, keep windows with one non-null label."""
    kept = []
    for start in range(0, len(labels) - w + 1, stride):
        seg = labels[start:start + w]
        if all(v == seg[0] for v in seg) and seg[0] != null:
            kept.append((start, seg[0]))
    return kept


def test_uniform_stream_three_windows():
    ws = segment_windows(_rec(np.ones(1024)), _spec(512))
    assert len(ws) == 3
    assert np.array_equal(ws.x[:, 0, 0], [0.0, 512.0, 1024.0])  # starts 0, 256, 512 (c = 2)


def test_stride_rounds_down():
    assert _spec(10, overlap=0.35).stride == 6
    assert list(window_starts(25, 10, 6)) == [0, 6, 12]


def test_three_segment_stream_matches_enumeration():
    # segments: label 1 x 12, null x 6, label 2 x 10 ; w = 4, stride 2
    labels = np.array([1] * 12 + [0] * 6 + [2] * 10)
    ws = segment_windows(_rec(labels, c=1), _spec(4))
    oracle = _naive_windows(labels, 4, 2)
    assert [(int(x), int(y)) for x, y in zip(ws.x[:, 0, 0], ws.y)] == [(s, {1: 0, 2: 1}[k]) for s, k in oracle]
    # a window entirely inside the null segment (start 12) is discarded
    assert 12 not in ws.x[:, 0, 0]
    # a window straddling label 1 -> null (start 10) is discarded
    assert 10 not in ws.x[:, 0, 0]


def test_short_recording_gives_empty_set():
    ws = segment_windows(_rec(np.ones(5)), _spec(8))
    assert len(ws) == 0 and ws.x.shape == (0, 8, 2)


def test_unknown_label_is_discarded():
    ws = segment_windows(_rec(np.full(16, 7)), _spec(4))
    assert len(ws) == 0


def test_windows_carry_subject_and_class_index():
    ws = segment_windows(_rec(np.full(8, 3), subject=4), _spec(4))
    assert set(ws.s) == {4} and set(ws.y) == {2}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.integers(1, 6), st.integers(2, 8),
       st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_segmentation_property(run_labels, run_len, w, overlap):
    labels = np.repeat(run_labels, run_len)
    spec = _spec(w, overlap)
    ws = segment_windows(_rec(labels, c=1), spec)
    oracle = _naive_windows(labels.tolist(), w, spec.stride)
    assert len(ws) == len(oracle)
    # kept + discarded = floor((T - w) / stride) + 1
    n_starts = (len(labels) - w) // spec.stride + 1 if len(labels) >= w else 0
    assert len(window_starts(len(labels), w, spec.stride)) == n_starts
    for x, y in zip(ws.x, ws.y):
        start = int(x[0, 0])
        assert len(set(labels[start:start + w])) == 1 and labels[start] != 0
        assert spec.activity_labels[y] == labels[start]


def _ws(x):
    x = np.asarray(x, dtype=float)
    return WindowSet(x, np.zeros(len(x), int), np.ones(len(x), int))


def test_fit_minmax_examples():
    p = fit_minmax(_ws(np.full((1, 4, 2), 5.0)))
    assert p.min.tolist() == [5.0, 5.0] and p.max.tolist() == [5.0, 5.0]
    x = np.array([[[-2.0], [0.0]], [[1.0], [3.0]]])
    p = fit_minmax(_ws(x))
    assert p.min.tolist() == [-2.0] and p.max.tolist() == [3.0]


def test_fit_minmax_empty():
    with pytest.raises(ValueError):
        fit_minmax(WindowSet.empty(4, 2))


def test_apply_minmax_examples():
    p = fit_minmax(_ws(np.array([[[2.0, 1.0], [6.0, 1.0]]])))
    out = apply_minmax(_ws(np.array([[[2.0, 1.0], [6.0, 1.0], [-2.0, 9.0]]])), p)
    assert out.x[0, 0, 0] == 0.0
    assert out.x[0, 1, 0] == 1.0
    assert out.x[0, 2, 0] == -1.0  # min - span -> -1, unclipped
    assert np.all(out.x[..., 1] == 0.0)  # constant channel


def test_apply_minmax_channel_mismatch():
    p = fit_minmax(_ws(np.zeros((1, 2, 3))))
    with pytest.raises(ShapeError):
        apply_minmax(_ws(np.zeros((1, 2, 2))), p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_minmax_train_range(seed):
    x = np.random.default_rng(seed).normal(size=(5, 7, 3)) * 10
    out = apply_minmax(_ws(x), fit_minmax(_ws(x)))
    assert out.x.min() >= 0.0 and out.x.max() <= 1.0


def test_loso_splits_eight_subjects():
    folds = loso_splits(range(1, 9), seed=3)
    assert [f.test_subject for f in folds] == list(range(1, 9))
    for f in folds:
        assert len(f.val_subjects) == 2 and len(f.train_subjects) == 5
        union = {f.test_subject} | set(f.val_subjects) | set(f.train_subjects)
        assert union == set(range(1, 9))
    assert [f.val_subjects for f in folds] == [f.val_subjects for f in loso_splits(range(1, 9), seed=3)]


def test_loso_splits_too_few():
    with pytest.raises(ValueError):
        loso_splits([1, 2, 3], n_val=2)


def test_fold_spec_rejects_overlap():
    with pytest.raises(ValueError):
        FoldSpec(1, [1, 2], [3], 0)


def test_prepare_fold_isolation_and_scaler(toy_windows):
    for fold in loso_splits(toy_windows.subjects, 2, 0):
        data = prepare_fold(toy_windows, fold, 3)
        assert fold.test_subject not in set(data.train.s) | set(data.val.s)
        assert set(data.test.s) == {fold.test_subject}
        refit = fit_minmax(toy_windows.for_subjects(fold.train_subjects))
        assert np.array_equal(refit.min, data.scaler.min) and np.array_equal(refit.max, data.scaler.max)
