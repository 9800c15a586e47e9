import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harpair.errors import PairConstructionError
from harpair.pairs import (
    build_pair_set,
    build_random_pair_set,
    check_pair_invariants,
    pair_batches,
)
from harpair.segmentation import WindowSet

from conftest import random_corpus


def _corpus(ys, ss, w=3, c=1):
    ys, ss = np.asarray(ys), np.asarray(ss)
    return WindowSet(np.zeros((len(ys), w, c)), ys, ss)


def test_two_subjects_one_activity_oracle():
    ws = _corpus([0, 0, 0, 0], [1, 1, 2, 2])
    # all 6 unordered window pairs; valid ones carry g = subject equality
    valid = {frozenset(p): int(ws.s[p[0]] == ws.s[p[1]]) for p in itertools.combinations(range(4), 2)}
    ps = build_pair_set(ws, 4, seed=0)
    assert len(ps) == 8
    for pair in ps:
        key = frozenset((pair.index_a, pair.index_b))
        assert key in valid and valid[key] == pair.g


def test_target_gives_exact_counts(toy_windows):
    ps = build_pair_set(toy_windows, 2500, seed=1)
    assert len(ps) == 5000
    assert ps.class_counts() == (2500, 2500)
    check_pair_invariants(ps, toy_windows)


def test_single_subject_is_infeasible_for_g0():
    with pytest.raises(PairConstructionError, match="g=0"):
        build_pair_set(_corpus([0, 0, 1], [1, 1, 1]), 3, 0)


def test_singleton_cells_are_infeasible_for_g1():
    with pytest.raises(PairConstructionError, match="g=1"):
        build_pair_set(_corpus([0, 1, 0, 1], [1, 1, 2, 2]), 3, 0)


def test_same_seed_same_pairs(toy_windows):
    a = build_pair_set(toy_windows, 300, 7)
    b = build_pair_set(toy_windows, 300, 7)
    assert np.array_equal(a.index_a, b.index_a) and np.array_equal(a.index_b, b.index_b)
    c = build_pair_set(toy_windows, 300, 8)
    assert not np.array_equal(a.index_a, c.index_a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200))
def test_pair_invariants_on_random_corpora(seed, target):
    rng = np.random.default_rng(seed)
    ws = random_corpus(rng)
    ps = build_pair_set(ws, target, seed)
    check_pair_invariants(ps, ws)
    assert np.all(ps.index_a != ps.index_b)
    assert np.all(ps.y_a == ps.y_b)
    assert np.array_equal(ps.g == 1, ps.s_a == ps.s_b)
    assert ps.class_counts() == (target, target)


def test_g1_cells_are_uniform():
    # balanced corpus: 3 subjects x 3 activities x 4 windows -> 9 equally likely cells
    ys = np.repeat(np.tile([0, 1, 2], 3), 4)
    ss = np.repeat([1, 2, 3], 12)
    ws = _corpus(ys, ss)
    n = 100_000
    ps = build_pair_set(ws, n, seed=11)
    same = ps.g == 1
    cells = ps.y_a[same] * 10 + ps.s_a[same]
    _, counts = np.unique(cells, return_counts=True)
    assert len(counts) == 9
    p = 1 / 9
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * sd)


def test_random_pair_set_mixes_activities(toy_windows):
    ps = build_random_pair_set(toy_windows, 500, 0)
    assert ps.class_counts() == (500, 500)
    assert np.any(ps.y_a != ps.y_b)
    assert np.array_equal(ps.g == 1, ps.s_a == ps.s_b)
    with pytest.raises(AttributeError):
        ps.y
    ours = build_pair_set(toy_windows, 500, 0)
    assert not np.any(ours.y_a != ours.y_b)


def test_pair_batches_sizes():
    ws = _corpus([0] * 6, [1, 1, 1, 2, 2, 2])
    ps = build_pair_set(ws, 5, 0)
    batches = pair_batches(ps, 3, seed=0)
    assert sorted(len(b) for b in batches) == [3, 3, 4]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    again = pair_batches(ps, 3, seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_pair_batches_division(toy_windows):
    ps = build_pair_set(toy_windows, 25_000, 0)
    batches = pair_batches(ps, 100, 1)
    assert len(batches) == 100 and {len(b) for b in batches} == {500}


def test_pair_batches_errors():
    ps = build_pair_set(_corpus([0] * 4, [1, 1, 2, 2]), 1, 0)
    with pytest.raises(ValueError):
        pair_batches(ps, 0, 0)
    with pytest.raises(ValueError):
        pair_batches(ps, 3, 0)
