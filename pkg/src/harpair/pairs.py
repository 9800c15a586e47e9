"""
Balanced window pairs for the subject discrimination task.

Pairs reference windows by index. ``g = 1`` marks a same-subject pair and
``g = 0`` a different-subject pair. The default builder only pairs windows
of the same activity; ``build_random_pair_set`` drops that constraint and
is used for the subject-pair baseline discriminator.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from .errors import PairConstructionError
from .segmentation import WindowSet

logger = logging.getLogger(__name__)


class PairSample(NamedTuple):
    index_a: int
    index_b: int
    y: int
    s_a: int
    s_b: int
    g: int


@dataclass(frozen=True)
class PairSet:
    index_a: np.ndarray
    index_b: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray
    g: np.ndarray
    per_class_target: int
    seed: int
    same_activity: bool = True

    def __len__(self):
        return len(self.g)

    def __getitem__(self, i) -> PairSample:
        return PairSample(int(self.index_a[i]), int(self.index_b[i]), int(self.y_a[i]),
                          int(self.s_a[i]), int(self.s_b[i]), int(self.g[i]))

    @property
    def y(self) -> np.ndarray:
        if not self.same_activity:
            raise AttributeError("pairs of a random pair set carry no shared activity")
        return self.y_a

    def class_counts(self) -> Tuple[int, int]:
        n_same = int(self.g.sum())
        return len(self.g) - n_same, n_same

    def take(self, idx) -> "PairSet":
        return PairSet(self.index_a[idx], self.index_b[idx], self.y_a[idx], self.y_b[idx],
                       self.s_a[idx], self.s_b[idx], self.g[idx], self.per_class_target,
                       self.seed, self.same_activity)


def _cells(windows: WindowSet) -> Dict[Tuple[int, int], np.ndarray]:
    """Window indices grouped by (activity, subject)."""
    cells = {}
    order = np.lexsort((np.arange(len(windows)), windows.s, windows.y))
    ys, ss = windows.y[order], windows.s[order]
    bounds = np.flatnonzero((np.diff(ys) != 0) | (np.diff(ss) != 0)) + 1
    for chunk in np.split(np.arange(len(order)), bounds):
        if len(chunk):
            cells[(int(ys[chunk[0]]), int(ss[chunk[0]]))] = order[chunk]
    return cells


def _two_distinct(rng, n: np.ndarray):
    """Two distinct uniform draws from range(n) for each entry of n (all n >= 2)."""
    i = rng.integers(0, n)
    j = rng.integers(0, n - 1)
    j = j + (j >= i)
    return i, j


def _draw_from_groups(rng, groups: List[np.ndarray], choice: np.ndarray) -> np.ndarray:
    """For each entry of ``choice`` (a group id) draw one uniform member of that group."""
    sizes = np.array([len(gr) for gr in groups])
    pos = rng.integers(0, sizes[choice])
    flat = np.concatenate(groups)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return flat[offsets[choice] + pos]


def _same_activity_pairs(windows: WindowSet, n: int, same_subject: bool, rng) -> Tuple[np.ndarray, np.ndarray]:
    cells = _cells(windows)
    activities = sorted({a for a, _ in cells})
    feasible = {}
    for a in activities:
        subs = [s for (a2, s) in cells if a2 == a]
        if same_subject:
            subs = [s for s in subs if len(cells[(a, s)]) >= 2]
            if subs:
                feasible[a] = subs
        elif len(subs) >= 2:
            feasible[a] = subs
    if not feasible:
        label = "g=1 (same subject)" if same_subject else "g=0 (different subjects)"
        raise PairConstructionError(f"no valid pair exists for class {label}")

    acts = np.array(sorted(feasible))
    chosen = rng.choice(acts, size=n)
    ia = np.empty(n, dtype=np.int64)
    ib = np.empty(n, dtype=np.int64)
    for a in acts:
        rows = np.flatnonzero(chosen == a)
        if not len(rows):
            continue
        subs = feasible[int(a)]
        groups = [cells[(int(a), s)] for s in subs]
        if same_subject:
            pick = rng.integers(0, len(subs), size=len(rows))
            sizes = np.array([len(gr) for gr in groups])[pick]
            i, j = _two_distinct(rng, sizes)
            flat = np.concatenate(groups)
            offsets = np.concatenate([[0], np.cumsum([len(gr) for gr in groups])[:-1]])[pick]
            ia[rows] = flat[offsets + i]
            ib[rows] = flat[offsets + j]
        else:
            p, q = _two_distinct(rng, np.full(len(rows), len(subs)))
            ia[rows] = _draw_from_groups(rng, groups, p)
            ib[rows] = _draw_from_groups(rng, groups, q)
    return ia, ib


def _any_activity_pairs(windows: WindowSet, n: int, same_subject: bool, rng) -> Tuple[np.ndarray, np.ndarray]:
    subjects = windows.subjects
    groups = [np.flatnonzero(windows.s == s) for s in subjects]
    if same_subject:
        keep = [k for k, gr in enumerate(groups) if len(gr) >= 2]
        if not keep:
            raise PairConstructionError("no valid pair exists for class g=1 (same subject)")
        groups = [groups[k] for k in keep]
        pick = rng.integers(0, len(groups), size=n)
        sizes = np.array([len(gr) for gr in groups])[pick]
        i, j = _two_distinct(rng, sizes)
        flat = np.concatenate(groups)
        offsets = np.concatenate([[0], np.cumsum([len(gr) for gr in groups])[:-1]])[pick]
        return flat[offsets + i], flat[offsets + j]
    if len(groups) < 2:
        raise PairConstructionError("no valid pair exists for class g=0 (different subjects)")
    p, q = _two_distinct(rng, np.full(n, len(groups)))
    return _draw_from_groups(rng, groups, p), _draw_from_groups(rng, groups, q)


def _assemble(windows, parts, per_class_target, seed, same_activity) -> PairSet:
    (ia0, ib0), (ia1, ib1) = parts
    ia = np.concatenate([ia0, ia1])
    ib = np.concatenate([ib0, ib1])
    g = np.concatenate([np.zeros(len(ia0), np.int64), np.ones(len(ia1), np.int64)])
    return PairSet(ia, ib, windows.y[ia], windows.y[ib], windows.s[ia], windows.s[ib], g,
                   per_class_target, seed, same_activity)


def build_pair_set(windows: WindowSet, per_class_target: int, seed: int) -> PairSet:
    """Sample ``per_class_target`` same-activity pairs for each of g=0 and g=1.

    The activity is drawn uniformly among activities that admit the class,
    then the subject(s), then the windows. Draws are independent, so the
    same unordered pair may repeat when the pair space is small.
    """
    if per_class_target < 1:
        raise ValueError("per_class_target must be >= 1")
    rng = np.random.default_rng(seed)
    different = _same_activity_pairs(windows, per_class_target, False, rng)
    same = _same_activity_pairs(windows, per_class_target, True, rng)
    return _assemble(windows, (different, same), per_class_target, seed, True)


def build_random_pair_set(windows: WindowSet, per_class_target: int, seed: int) -> PairSet:
    """Balanced subject pairs with no activity constraint (pairs may mix activities)."""
    if per_class_target < 1:
        raise ValueError("per_class_target must be >= 1")
    rng = np.random.default_rng(seed)
    different = _any_activity_pairs(windows, per_class_target, False, rng)
    same = _any_activity_pairs(windows, per_class_target, True, rng)
    return _assemble(windows, (different, same), per_class_target, seed, False)


def pair_batches(pair_set: PairSet, n_batches: int, seed: int) -> List[np.ndarray]:
    """Shuffle pair positions and split them into ``n_batches`` near-equal batches."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if n_batches > len(pair_set):
        raise ValueError(f"cannot split {len(pair_set)} pairs into {n_batches} batches")
    perm = np.random.default_rng(seed).permutation(len(pair_set))
    return np.array_split(perm, n_batches)


def check_pair_invariants(pair_set: PairSet, windows: WindowSet) -> None:
    """Raise AssertionError if any pair breaks the pair-set contract."""
    ia, ib = pair_set.index_a, pair_set.index_b
    if np.any(ia == ib):
        raise AssertionError("a pair references the same window twice")
    if not (np.array_equal(windows.s[ia], pair_set.s_a) and np.array_equal(windows.s[ib], pair_set.s_b)):
        raise AssertionError("stored subject ids disagree with the source windows")
    if not (np.array_equal(windows.y[ia], pair_set.y_a) and np.array_equal(windows.y[ib], pair_set.y_b)):
        raise AssertionError("stored activity labels disagree with the source windows")
    if pair_set.same_activity and np.any(pair_set.y_a != pair_set.y_b):
        raise AssertionError("pair members differ in activity")
    if np.any(pair_set.g != (pair_set.s_a == pair_set.s_b)):
        raise AssertionError("g does not match subject equality")
    n0, n1 = pair_set.class_counts()
    if n0 != pair_set.per_class_target or n1 != pair_set.per_class_target:
        raise AssertionError(f"class counts ({n0}, {n1}) != target {pair_set.per_class_target}")
