import numpy as np
import pytest

from harpair.data import generate_synthetic, synthetic_spec
from harpair.segmentation import WindowSet, segment_all


def write_table(path, rows, sep=" "):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(sep.join("NaN" if (isinstance(v, float) and np.isnan(v)) else f"{v:g}" for v in row))
            fh.write("\n")


@pytest.fixture
def pamap2_root(tmp_path):
    """Tiny PAMAP2-layout files for subjects 1..9 (54 space-separated columns)."""
    rng = np.random.default_rng(0)
    for subject in range(1, 10):
        n = 40
        table = rng.normal(size=(n, 54))
        table[:, 0] = np.arange(n) / 100.0
        table[:, 1] = np.repeat([1, 9, 4, 0], n // 4)  # 9 is an optional activity -> null
        table[5, 4] = np.nan  # dropout inside a selected channel (hand acc16 x)
        table[0, 21] = np.nan  # dropout at the start of chest acc16 x
        write_table(tmp_path / f"subject{100 + subject}.dat", table)
    return tmp_path


@pytest.fixture
def mhealth_root(tmp_path):
    rng = np.random.default_rng(1)
    for subject in range(1, 11):
        table = rng.normal(size=(30, 24))
        table[:, 23] = np.repeat([0, 3, 5], 10)
        write_table(tmp_path / f"mHealth_subject{subject}.log", table, sep="\t")
    return tmp_path


@pytest.fixture
def realdisp_root(tmp_path):
    rng = np.random.default_rng(2)
    for subject in range(1, 18):
        table = rng.normal(size=(20, 120))
        table[:, 0] = np.arange(20)
        table[:, 119] = np.repeat([0, 33], 10)
        write_table(tmp_path / f"subject{subject}_ideal.log", table, sep="\t")
    return tmp_path


@pytest.fixture(scope="session")
def toy_windows():
    recs = generate_synthetic(n_subjects=5, n_activities=3, duration_s=60, sample_rate_hz=20, c=3,
                              subject_distortion_strength=1.0, seed=3)
    return segment_all(recs, synthetic_spec(5, 3, window_size=32, sample_rate_hz=20))


def random_corpus(rng, n_subjects=None, n_activities=None, w=4, c=2):
    """Random small window corpus; every subject has >= 2 windows of the first activity."""
    n_subjects = n_subjects or int(rng.integers(2, 6))
    n_activities = n_activities or int(rng.integers(1, 5))
    ys, ss = [], []
    for s in range(1, n_subjects + 1):
        for a in range(n_activities):
            k = int(rng.integers(0, 5)) if a else int(rng.integers(2, 5))
            ys += [a] * k
            ss += [s] * k
    n = len(ys)
    return WindowSet(rng.normal(size=(n, w, c)), np.array(ys), np.array(ss))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
