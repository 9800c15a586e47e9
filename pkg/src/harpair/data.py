"""
Raw sensor stream loading for PAMAP2, MHEALTH and REALDISP, plus a synthetic
generator with controllable inter-subject distortion.

Every loader returns one ``RawRecording`` per subject. Labels stay aligned
row-for-row with the channel matrix; label 0 marks null/transient samples.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DatasetError, ParseError

logger = logging.getLogger(__name__)

DATASET_NAMES = ("PAMAP2", "MHEALTH", "REALDISP", "SYNTHETIC")

# PAMAP2: timestamp, activityID, heart rate, then hand/chest/ankle IMU blocks of 17
# columns each (temperature, acc16 xyz, acc6 xyz, gyro xyz, mag xyz, orientation 4).
PAMAP2_N_COLS = 54
PAMAP2_PROTOCOL_ACTIVITIES = (1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24)
PAMAP2_EXCLUDED_SUBJECTS = (9,)
_PAMAP2_IMUS = (("hand", 3), ("chest", 20), ("ankle", 37))
PAMAP2_CHANNELS = [
    start + off
    for _, start in _PAMAP2_IMUS
    for off in (1, 2, 3, 7, 8, 9)
]
PAMAP2_CHANNEL_NAMES = [
    f"{imu}_{kind}_{axis}"
    for imu, _ in _PAMAP2_IMUS
    for kind in ("acc16", "gyro")
    for axis in "xyz"
]

# MHEALTH: chest acc (0-2), ECG (3-4), ankle acc/gyro/mag (5-13),
# right-arm acc/gyro/mag (14-22), label (23). The chest unit has no gyroscope.
MHEALTH_N_COLS = 24
MHEALTH_ACTIVITIES = tuple(range(1, 13))
MHEALTH_CHANNELS = [0, 1, 2, 5, 6, 7, 8, 9, 10, 14, 15, 16, 17, 18, 19]
MHEALTH_CHANNEL_NAMES = (
    [f"chest_acc_{a}" for a in "xyz"]
    + [f"ankle_{k}_{a}" for k in ("acc", "gyro") for a in "xyz"]
    + [f"wrist_{k}_{a}" for k in ("acc", "gyro") for a in "xyz"]
)

# REALDISP: 2 time columns, 9 sensors x (acc 3, gyro 3, mag 3, quaternion 4), label.
REALDISP_N_COLS = 2 + 9 * 13 + 1
REALDISP_SENSORS = ("RLA", "RUA", "BACK", "LUA", "LLA", "RC", "RT", "LT", "LC")
REALDISP_ACTIVITIES = tuple(range(1, 34))
REALDISP_SCENARIOS = ("ideal", "self", "mutual")
REALDISP_CHANNELS = [2 + 13 * k + off for k in range(9) for off in range(6)]
REALDISP_CHANNEL_NAMES = [
    f"{sensor}_{kind}_{axis}"
    for sensor in REALDISP_SENSORS
    for kind in ("acc", "gyro")
    for axis in "xyz"
]


@dataclass
class RawRecording:
    subject_id: int
    channels: np.ndarray
    labels: np.ndarray
    sample_rate_hz: float
    channel_names: List[str]

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.channels.ndim != 2:
            raise ValueError(f"channels must be 2-D, got shape {self.channels.shape}")
        if self.channels.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.channels.shape[0]} channel rows but {self.labels.shape[0]} labels"
            )
        if self.subject_id < 1:
            raise ValueError(f"subject_id must be >= 1, got {self.subject_id}")
        if len(self.channel_names) != self.channels.shape[1]:
            raise ValueError(
                f"{len(self.channel_names)} channel names for {self.channels.shape[1]} channels"
            )

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class DatasetSpec:
    """Which subjects/activities/channels to use and how to window them.

    ``activity_labels`` are raw dataset label values; they are kept sorted so
    the class index of a raw label is stable across runs.
    """

    name: str
    subjects: List[int]
    activity_labels: List[int]
    window_size: int
    overlap_fraction: float
    channel_selector: Optional[List[int]] = None
    sample_rate_hz: float = 0.0
    scenario: str = "ideal"
    activity_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {DATASET_NAMES}")
        labels = [int(v) for v in self.activity_labels]
        if len(set(labels)) != len(labels):
            raise ConfigError("activity_labels contains duplicates")
        if len(labels) < 2:
            raise ConfigError("need at least 2 activity labels")
        if 0 in labels:
            raise ConfigError("label 0 is reserved for the null class")
        self.activity_labels = sorted(labels)
        self.subjects = [int(s) for s in self.subjects]
        if self.window_size <= 0:
            raise ConfigError("window_size must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError("overlap_fraction must be in [0, 1)")

    @property
    def n_classes(self) -> int:
        return len(self.activity_labels)

    @property
    def stride(self) -> int:
        return max(1, int(np.floor(self.window_size * (1.0 - self.overlap_fraction))))

    @property
    def label_to_index(self) -> Dict[int, int]:
        return {raw: i for i, raw in enumerate(self.activity_labels)}


def pamap2_spec(subjects: Optional[Sequence[int]] = None, allow_excluded: bool = False) -> DatasetSpec:
    subjects = list(range(1, 9)) if subjects is None else list(subjects)
    if not allow_excluded:
        dropped = [s for s in subjects if s in PAMAP2_EXCLUDED_SUBJECTS]
        if dropped:
            logger.info("PAMAP2: excluding subjects %s (insufficient samples)", dropped)
        subjects = [s for s in subjects if s not in PAMAP2_EXCLUDED_SUBJECTS]
    return DatasetSpec("PAMAP2", subjects, list(PAMAP2_PROTOCOL_ACTIVITIES), 512, 0.5,
                       list(PAMAP2_CHANNELS), 100.0)


def mhealth_spec(subjects: Optional[Sequence[int]] = None) -> DatasetSpec:
    subjects = list(range(1, 11)) if subjects is None else list(subjects)
    return DatasetSpec("MHEALTH", subjects, list(MHEALTH_ACTIVITIES), 512, 0.5,
                       list(MHEALTH_CHANNELS), 50.0)


def realdisp_spec(subjects: Optional[Sequence[int]] = None, scenario: str = "ideal") -> DatasetSpec:
    subjects = list(range(1, 18)) if subjects is None else list(subjects)
    return DatasetSpec("REALDISP", subjects, list(REALDISP_ACTIVITIES), 256, 0.5,
                       list(REALDISP_CHANNELS), 50.0, scenario=scenario)


def synthetic_spec(n_subjects: int, n_activities: int, window_size: int = 64,
                   overlap_fraction: float = 0.5, sample_rate_hz: float = 25.0) -> DatasetSpec:
    return DatasetSpec("SYNTHETIC", list(range(1, n_subjects + 1)),
                       list(range(1, n_activities + 1)), window_size, overlap_fraction,
                       None, sample_rate_hz)


# -- file parsing ---------------------------------------------------------------

def _first_bad_line(path: Path, n_cols: int, delimiter):
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n = len(line.split(delimiter)) if delimiter else len(line.split())
            if n != n_cols:
                return lineno, n
    return None, None


def load_table(path, n_cols: int, delimiter=None) -> np.ndarray:
    """Read a numeric text table, enforcing an exact column count."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing subject file: {path}")
    with open(path) as fh:
        if not any(line.strip() for line in fh):
            raise DatasetError(f"empty subject file: {path}")
    try:
        table = np.loadtxt(path, dtype=np.float64, delimiter=delimiter, ndmin=2)
    except ValueError as exc:
        lineno, n = _first_bad_line(path, n_cols, delimiter)
        if lineno is not None:
            raise ParseError(path, lineno, f"expected {n_cols} columns, found {n}") from exc
        raise ParseError(path, 0, str(exc)) from exc
    if table.size == 0:
        raise DatasetError(f"empty subject file: {path}")
    if table.shape[1] != n_cols:
        lineno, n = _first_bad_line(path, n_cols, delimiter)
        raise ParseError(path, lineno or 1, f"expected {n_cols} columns, found {n or table.shape[1]}")
    return table


def interpolate_missing(values: np.ndarray, source: str = "") -> np.ndarray:
    """Fill NaNs column-wise by linear interpolation; edges take the nearest valid value."""
    out = np.array(values, dtype=np.float64, copy=True)
    rows = np.arange(out.shape[0])
    for j in range(out.shape[1]):
        col = out[:, j]
        ok = np.isfinite(col)
        if ok.all():
            continue
        if not ok.any():
            raise DatasetError(f"{source}: channel {j} has no valid samples")
        # np.interp holds the boundary values constant outside the valid range
        out[:, j] = np.interp(rows, rows[ok], col[ok])
    return out


def _relabel(raw_labels: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    labels = raw_labels.astype(np.int64)
    keep = np.isin(labels, spec.activity_labels)
    return np.where(keep, labels, 0)


def _find_file(root: Path, candidates: Sequence[str]) -> Path:
    for name in candidates:
        for base in (root, root / "Protocol"):
            p = base / name
            if p.is_file():
                return p
    raise DatasetError(f"missing subject file: {root / candidates[0]}")


def parse_pamap2(root_path, spec: DatasetSpec) -> List[RawRecording]:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"PAMAP2 root does not exist: {root}")
    selector = spec.channel_selector or PAMAP2_CHANNELS
    names = PAMAP2_CHANNEL_NAMES if selector == PAMAP2_CHANNELS else [f"col{j}" for j in selector]
    recordings = []
    for subject in spec.subjects:
        path = _find_file(root, [f"subject{100 + subject}.dat"])
        table = load_table(path, PAMAP2_N_COLS)
        channels = interpolate_missing(table[:, selector], str(path))
        raw = np.nan_to_num(table[:, 1], nan=0.0)
        recordings.append(RawRecording(subject, channels, _relabel(raw, spec),
                                       spec.sample_rate_hz or 100.0, list(names)))
        logger.debug("PAMAP2 subject %d: %d rows", subject, table.shape[0])
    return recordings


def parse_mhealth(root_path, spec: DatasetSpec) -> List[RawRecording]:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"MHEALTH root does not exist: {root}")
    selector = spec.channel_selector or MHEALTH_CHANNELS
    names = MHEALTH_CHANNEL_NAMES if selector == MHEALTH_CHANNELS else [f"col{j}" for j in selector]
    recordings = []
    for subject in spec.subjects:
        path = _find_file(root, [f"mHealth_subject{subject}.log"])
        table = load_table(path, MHEALTH_N_COLS)
        channels = interpolate_missing(table[:, selector], str(path))
        recordings.append(RawRecording(subject, channels, _relabel(table[:, -1], spec),
                                       spec.sample_rate_hz or 50.0, list(names)))
    return recordings


def _realdisp_files(root: Path, subject: int, scenario: str) -> List[Path]:
    if scenario == "mutual":
        files = sorted(root.glob(f"subject{subject}_mutual*.log"))
        if not files:
            raise DatasetError(f"missing subject file: {root / f'subject{subject}_mutual*.log'}")
        return files
    return [_find_file(root, [f"subject{subject}_{scenario}.log"])]


def parse_realdisp(root_path, spec: DatasetSpec, scenario: Optional[str] = None) -> List[RawRecording]:
    """Load REALDISP logs for one placement scenario (ideal, self or mutual).

    Mutual-displacement subjects may have several logs; they are concatenated
    with a single null-labelled separator row, so no kept window can span
    two files.
    """
    scenario = scenario or spec.scenario
    if scenario not in REALDISP_SCENARIOS:
        raise ConfigError(f"unknown REALDISP scenario {scenario!r}")
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"REALDISP root does not exist: {root}")
    selector = spec.channel_selector or REALDISP_CHANNELS
    names = REALDISP_CHANNEL_NAMES if selector == REALDISP_CHANNELS else [f"col{j}" for j in selector]
    recordings = []
    for subject in spec.subjects:
        chunks, labels = [], []
        for path in _realdisp_files(root, subject, scenario):
            table = load_table(path, REALDISP_N_COLS)
            if chunks:
                chunks.append(chunks[-1][-1:])
                labels.append(np.zeros(1, dtype=np.int64))
            chunks.append(interpolate_missing(table[:, selector], str(path)))
            labels.append(_relabel(table[:, -1], spec))
        recordings.append(RawRecording(subject, np.concatenate(chunks), np.concatenate(labels),
                                       spec.sample_rate_hz or 50.0, list(names)))
    return recordings


def load_dataset(spec: DatasetSpec, root_path=None, synthetic: Optional[dict] = None) -> List[RawRecording]:
    if spec.name == "PAMAP2":
        return parse_pamap2(root_path, spec)
    if spec.name == "MHEALTH":
        return parse_mhealth(root_path, spec)
    if spec.name == "REALDISP":
        return parse_realdisp(root_path, spec)
    params = dict(synthetic or {})
    params.setdefault("n_subjects", len(spec.subjects))
    params.setdefault("n_activities", spec.n_classes)
    params.setdefault("sample_rate_hz", spec.sample_rate_hz or 25.0)
    recordings = generate_synthetic(**params)
    wanted = set(spec.subjects)
    return [r for r in recordings if r.subject_id in wanted]


# -- synthetic data -------------------------------------------------------------

def generate_synthetic(n_subjects: int = 6, n_activities: int = 4, duration_s: float = 240.0,
                       sample_rate_hz: float = 25.0, c: int = 6,
                       subject_distortion_strength: float = 1.0, seed: int = 0,
                       segment_s: float = 10.0, transition_s: float = 1.0,
                       noise_std: float = 0.05, n_harmonics: int = 3) -> List[RawRecording]:
    """Build sinusoid-bank activity streams with per-subject distortions.

    Each activity owns a base frequency, per-channel harmonic amplitudes and
    phases, and a per-channel offset (a stand-in for posture/gravity). A
    subject multiplies every channel by a fixed gain, shifts each channel's
    phase and warps time by a constant factor; all three scale with
    ``subject_distortion_strength`` and vanish at 0. Activities cycle in
    ``segment_s`` blocks separated by ``transition_s`` of null-labelled noise.
    """
    if n_subjects < 2 or n_activities < 2 or c < 2:
        raise ValueError("n_subjects, n_activities and c must all be >= 2")
    if subject_distortion_strength < 0:
        raise ValueError("subject_distortion_strength must be >= 0")
    if duration_s <= 0 or sample_rate_hz <= 0:
        raise ValueError("duration_s and sample_rate_hz must be positive")

    proto_rng = np.random.default_rng([seed, 0])
    f_lo = 0.5
    f_hi = sample_rate_hz / (4.0 * n_harmonics)
    ratio = min(1.6, (f_hi / f_lo) ** (1.0 / max(n_activities - 1, 1)))
    base_freq = f_lo * ratio ** np.arange(n_activities)
    harmonics = np.arange(1, n_harmonics + 1)
    amps = proto_rng.uniform(0.2, 1.0, (n_activities, c, n_harmonics)) / harmonics
    phases = proto_rng.uniform(0, 2 * np.pi, (n_activities, c, n_harmonics))
    offsets = proto_rng.normal(0.0, 0.5, (n_activities, c))

    n_samples = int(round(duration_s * sample_rate_hz))
    seg = max(1, int(round(segment_s * sample_rate_hz)))
    gap = max(0, int(round(transition_s * sample_rate_hz)))
    t = np.arange(n_samples) / sample_rate_hz

    recordings = []
    for subject in range(1, n_subjects + 1):
        subj_rng = np.random.default_rng([seed, 1, subject])
        s = subject_distortion_strength
        gain = np.exp(s * subj_rng.normal(0.0, 0.25, c))
        phase_shift = s * subj_rng.uniform(-np.pi, np.pi, c)
        warp = np.exp(s * subj_rng.uniform(-0.15, 0.15))
        start_act = int(subj_rng.integers(n_activities))

        labels = np.zeros(n_samples, dtype=np.int64)
        act_idx = np.full(n_samples, -1)
        pos, k = 0, start_act
        while pos < n_samples:
            end = min(pos + seg, n_samples)
            act_idx[pos:end] = k
            labels[pos:end] = k + 1
            pos = end + gap
            k = (k + 1) % n_activities

        signal = np.zeros((n_samples, c))
        tw = warp * t
        for a in range(n_activities):
            rows = act_idx == a
            if not rows.any():
                continue
            arg = 2 * np.pi * base_freq[a] * np.outer(tw[rows], harmonics)  # (n, H)
            for j in range(c):
                wave = np.sin(arg + phases[a, j] + phase_shift[j]) @ amps[a, j]
                signal[rows, j] = offsets[a, j] + wave
        signal *= gain
        noise_rng = np.random.default_rng([seed, 2, subject])
        signal += noise_std * noise_rng.standard_normal(signal.shape)
        recordings.append(RawRecording(subject, signal, labels, sample_rate_hz,
                                       [f"ch{j}" for j in range(c)]))
    return recordings
