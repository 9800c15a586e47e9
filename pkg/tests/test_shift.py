import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from harpair.models import make_feature_extractor
from harpair.segmentation import WindowSet
from harpair.shift import (
    ShiftReport,
    latent_distance,
    latent_shift,
    percent_change,
    shift_delta,
    shift_from_latents,
    wasserstein_1d,
)


def sorted_oracle(a, b):
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def transport_oracle(a, b):
    """Exact optimal transport between uniform empirical measures, solved as a linear program."""
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    rows = np.zeros((n + m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        rows[n + j, j::m] = 1
    rhs = np.concatenate([np.full(n, 1 / n), np.full(m, 1 / m)])
    res = linprog(cost, A_eq=rows, b_eq=rhs, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def test_examples():
    a = np.array([0.3, -1.0, 2.0])
    assert wasserstein_1d(a, a) == 0.0
    assert wasserstein_1d([0, 0], [1, 1]) == 1.0
    assert wasserstein_1d([0, 1, 2], [0, 1, 5]) == 1.0


def test_empty_input():
    with pytest.raises(ValueError):
        wasserstein_1d([], [1.0])


def test_equal_size_matches_order_statistics():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        a, b = rng.normal(size=n), rng.normal(1, 2, size=n)
        assert abs(wasserstein_1d(a, b) - sorted_oracle(a, b)) <= 1e-9


def test_matches_transport_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a = rng.normal(size=int(rng.integers(1, 7)))
        b = rng.normal(size=int(rng.integers(1, 7)))
        assert abs(wasserstein_1d(a, b) - transport_oracle(a, b)) <= 1e-9


def test_unequal_sizes_with_ties():
    assert wasserstein_1d([0.0], [0.0, 1.0]) == pytest.approx(0.5)
    assert wasserstein_1d([1.0, 1.0, 1.0], [1.0]) == 0.0


_samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(_samples, _samples, _samples)
def test_metric_properties(a, b, c):
    ab, ba = wasserstein_1d(a, b), wasserstein_1d(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-9
    assert ab <= wasserstein_1d(a, c) + wasserstein_1d(c, b) + 1e-9


@settings(max_examples=50, deadline=None)
@given(_samples, _samples, st.floats(0.01, 100))
def test_scale_equivariance(a, b, lam):
    scaled = wasserstein_1d(np.multiply(a, lam), np.multiply(b, lam))
    assert scaled == pytest.approx(lam * wasserstein_1d(a, b), rel=1e-9, abs=1e-9)


def test_latent_distance_translation():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(40, 5))
    delta = np.array([0.5, -1.0, 0.0, 2.0, 0.25])
    assert latent_distance(z, z) == 0.0
    assert latent_distance(z, z + delta) == pytest.approx(np.mean(np.abs(delta)), abs=1e-12)


def test_latent_distance_methods():
    rng = np.random.default_rng(0)
    za, zb = rng.normal(size=(30, 4)), rng.normal(0.5, 1, size=(20, 4))
    assert latent_distance(za, zb, "sliced", seed=3) == latent_distance(za, zb, "sliced", seed=3)
    std = latent_distance(za, zb, "standardized")
    assert latent_distance(10 * za, 10 * zb, "standardized") == pytest.approx(std, rel=1e-9)
    with pytest.raises(ValueError):
        latent_distance(za, zb, "earth")


def _windows(n, w, c, seed, ys):
    rng = np.random.default_rng(seed)
    return WindowSet(rng.random((n, w, c)), ys, np.full(n, seed + 1))


def test_latent_shift_skips_missing_activities_and_ignores_order():
    f = make_feature_extractor(2, 16, 4, 0.25).eval()
    train = _windows(12, 16, 2, 0, [0] * 6 + [1] * 6)
    test = _windows(8, 16, 2, 1, [0] * 4 + [2] * 4)
    out = latent_shift(f, train, test)
    assert out["skipped"] == [1, 2]
    assert list(out["per_activity"]) == [0]
    perm = np.random.default_rng(5).permutation(len(test))
    again = latent_shift(f, train, test.subset(perm))
    assert again["overall"] == pytest.approx(out["overall"], abs=1e-12)
    assert again["per_activity"][0] == pytest.approx(out["per_activity"][0], abs=1e-12)


def test_identical_latent_sets_give_zero():
    z = np.random.default_rng(0).normal(size=(10, 3))
    y = np.array([0] * 5 + [1] * 5)
    out = shift_from_latents(z, y, z[::-1], y[::-1])
    assert out["overall"] == 0.0 and out["per_activity"] == {0: 0.0, 1: 0.0}


def test_no_overlap_gives_all_skipped():
    z = np.zeros((2, 3))
    out = shift_from_latents(z, np.array([0, 0]), z, np.array([1, 1]))
    assert out["per_activity"] == {} and out["skipped"] == [0, 1]


def test_percent_change():
    assert percent_change(2.0, 1.0) == 50.0
    assert percent_change(1.5, 1.5) == 0.0
    assert percent_change(1.0, 1.5) == -50.0
    assert percent_change(0.0, 1.0) is None


def test_shift_delta_averages_then_compares():
    s2 = [{"overall": 2.0, "per_activity": {0: 1.0, 1: 4.0}}, {"overall": 4.0, "per_activity": {0: 3.0}}]
    s3 = [{"overall": 1.0, "per_activity": {0: 1.0, 1: 2.0}}, {"overall": 2.0, "per_activity": {0: 1.0}}]
    r = shift_delta(s2, s3, activity_names={0: "walk", 1: "run"})
    assert (r.step2_overall, r.step3_overall, r.overall_change_pct) == (3.0, 1.5, 50.0)
    assert r.change_pct_per_activity == {0: 50.0, 1: 50.0}
    assert ShiftReport.from_dict(r.to_dict()) == r


def test_shift_delta_rejects_mismatched_folds():
    one = [{"overall": 1.0, "per_activity": {}}]
    with pytest.raises(ValueError):
        shift_delta(one, one * 2)
    with pytest.raises(ValueError):
        shift_delta(one, one, fold_ids=([1], [2]))
