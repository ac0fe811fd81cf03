"""Trials, windows, scenario splits and a synthetic stand-in dataset.

A trial is one subject watching one video: 8 physiological channels at 1000 Hz
and (valence, arousal) annotations at 20 Hz. On disk a dataset directory holds::

    metadata.csv                  subject_id,video_id,quadrant
    physio/sub{S}_vid{V}.csv      time_ms,ecg,bvp,emg_coru,emg_trap,emg_zygo,gsr,rsp,skt
    annotations/sub{S}_vid{V}.csv time_ms,valence,arousal   (raw units, +-26225)
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, ParameterError, ParseError, RangeError

log = logging.getLogger(__name__)

CHANNELS = ("ecg", "bvp", "emg_coru", "emg_trap", "emg_zygo", "gsr", "rsp", "skt")
PHYSIO_HEADER = ("time_ms",) + CHANNELS
ANNOTATION_HEADER = ("time_ms", "valence", "arousal")
METADATA_HEADER = ("subject_id", "video_id", "quadrant")
QUADRANTS = ("HVHA", "HVLA", "LVHA", "LVLA")
SCENARIOS = ("across_time", "across_subject", "across_elicitor", "across_version")

SIGNAL_HZ = 1000
ANNOTATION_HZ = 20
SAMPLES_PER_ANNOTATION = SIGNAL_HZ // ANNOTATION_HZ
RAW_LIMIT = 26225.0
SCORE_MIN, SCORE_MAX = 0.5, 9.5

TRAIN_FRACTION_NUM, TRAIN_FRACTION_DEN = 7, 10  # across_time: first 70% of windows
SUBJECT_GROUPS = 5


# -- annotation scaling ---------------------------------------------------------

def scale_annotation(raw: float) -> float:
    """Map a raw joystick value in [-26225, 26225] linearly onto [0.5, 9.5]."""
    raw = float(raw)
    if not -RAW_LIMIT <= raw <= RAW_LIMIT:
        raise RangeError(f"annotation value {raw} outside [-{RAW_LIMIT:g}, {RAW_LIMIT:g}]")
    return SCORE_MIN + 9.0 * (raw + RAW_LIMIT) / (2 * RAW_LIMIT)


def scale_annotations(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    bad = np.flatnonzero(~((raw >= -RAW_LIMIT) & (raw <= RAW_LIMIT)))
    if bad.size:
        raise RangeError(f"annotation value {raw.flat[bad[0]]} outside [-{RAW_LIMIT:g}, {RAW_LIMIT:g}]")
    return SCORE_MIN + 9.0 * (raw + RAW_LIMIT) / (2 * RAW_LIMIT)


def unscale_annotations(scaled: np.ndarray) -> np.ndarray:
    return (np.asarray(scaled, dtype=np.float64) - SCORE_MIN) / 9.0 * (2 * RAW_LIMIT) - RAW_LIMIT


# -- core types -------------------------------------------------------------------

@dataclass(eq=False)
class Trial:
    subject_id: int
    video_id: int
    quadrant: str
    signals: np.ndarray  # [N_sig, 8]
    annotations: np.ndarray  # [N_ann, 2] (valence, arousal), scaled
    annotation_times: np.ndarray  # [N_ann] ms
    signal_times: np.ndarray | None = None  # [N_sig] ms; defaults to 0..N_sig-1

    def __post_init__(self):
        if self.signal_times is None:
            self.signal_times = np.arange(len(self.signals), dtype=np.float64)
        if self.quadrant not in QUADRANTS:
            raise InputError(f"unknown quadrant {self.quadrant!r}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.subject_id, self.video_id)

    def __len__(self) -> int:
        return len(self.signals)


@dataclass(frozen=True, eq=False)
class Sample:
    window: np.ndarray  # [seq_len, 8]
    target: np.ndarray  # [2] (valence, arousal)
    origin: tuple[int, int, float]  # (subject_id, video_id, end timestamp ms)
    start: int = 0

    @property
    def ref(self) -> tuple[int, int, int]:
        return (self.origin[0], self.origin[1], self.start)


@dataclass(frozen=True)
class FoldPlan:
    scenario: str
    fold_index: int
    train: frozenset
    test: frozenset
    segment_level: bool = False  # refs are (subject, video, start) rather than (subject, video)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> ChannelStats:
        stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        if stacked.size == 0:
            raise InputError("cannot compute channel statistics from no data")
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def standardize(trial: Trial, stats: ChannelStats) -> Trial:
    """Per-channel z-score with given statistics; zero-std channels are only centred."""
    std = np.where(stats.std > 0, stats.std, 1.0)
    return replace(trial, signals=(trial.signals - stats.mean) / std)


# -- windowing --------------------------------------------------------------------

def window_starts(n_signal: int, seq_len: int, hop: int) -> range:
    if seq_len < 1 or hop < 1:
        raise ParameterError(f"seq_len and hop must be >= 1, got {seq_len}, {hop}")
    if n_signal < seq_len:
        return range(0)
    return range(0, n_signal - seq_len + 1, hop)


def make_windows(trial: Trial, seq_len: int, hop: int, starts: Sequence[int] | None = None) -> list[Sample]:
    """Cut fixed-length windows; each target is the last annotation at or before the window end."""
    if len(trial) < seq_len:
        log.warning("trial %s has %d samples < seq_len %d; skipped", trial.key, len(trial), seq_len)
        return []
    if starts is None:
        starts = window_starts(len(trial), seq_len, hop)
    samples = []
    for start in starts:
        end_t = float(trial.signal_times[start + seq_len - 1])
        j = int(np.searchsorted(trial.annotation_times, end_t, side="right")) - 1
        if j < 0:
            log.warning("window %s@%d ends before the first annotation; skipped", trial.key, start)
            continue
        window = trial.signals[start:start + seq_len]
        samples.append(Sample(window, trial.annotations[j].copy(),
                              (trial.subject_id, trial.video_id, end_t), int(start)))
    return samples


# -- scenario splits ----------------------------------------------------------------

def n_folds(scenario: str, trials: Sequence[Trial] | None = None) -> int:
    if scenario == "across_time":
        return 1
    if scenario == "across_subject":
        if trials is None:
            return SUBJECT_GROUPS
        return max(1, min(SUBJECT_GROUPS, len({t.subject_id for t in trials})))
    if scenario == "across_elicitor":
        return len(QUADRANTS)
    if scenario == "across_version":
        return 2
    raise ParameterError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")


def across_time_refs(trial: Trial, seq_len: int, hop: int) -> tuple[list, list]:
    """Earlier 70% of a trial's windows train; later windows test once clear of a one-window gap."""
    starts = list(window_starts(len(trial), seq_len, hop))
    n_train = len(starts) * TRAIN_FRACTION_NUM // TRAIN_FRACTION_DEN
    train = starts[:n_train]
    boundary = train[-1] + seq_len + seq_len if train else 0
    test = [s for s in starts[n_train:] if s >= boundary]
    return ([(trial.subject_id, trial.video_id, s) for s in train],
            [(trial.subject_id, trial.video_id, s) for s in test])


def subject_groups(subjects: Sequence[int], k: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(sorted(set(subjects)))
    return [sorted(int(s) for s in g) for g in np.array_split(order, k)]


def version_split(trials: Sequence[Trial]) -> tuple[set, set]:
    """Per subject and quadrant, alternate videos (by id) between version A and version B.

    Subjects with a single video in a quadrant contribute nothing for that quadrant.
    """
    by_cell: dict[tuple[int, str], list[int]] = {}
    for t in trials:
        by_cell.setdefault((t.subject_id, t.quadrant), []).append(t.video_id)
    a, b = set(), set()
    for (subject, _), videos in by_cell.items():
        if len(videos) < 2:
            continue
        for rank, v in enumerate(sorted(videos)):
            (a if rank % 2 == 0 else b).add((subject, v))
    return a, b


def scenario_split(trials: Sequence[Trial], scenario: str, fold_index: int, seed: int = 0,
                   seq_len: int = 2048, hop: int = 1000) -> FoldPlan:
    """Resolve one fold of an evaluation scenario to disjoint train/test references."""
    k = n_folds(scenario, trials)
    if not 0 <= fold_index < k:
        raise ParameterError(f"fold {fold_index} invalid for {scenario} ({k} folds)")
    keys = [t.key for t in trials]
    if scenario == "across_time":
        train, test = [], []
        for t in trials:
            tr, te = across_time_refs(t, seq_len, hop)
            train += tr
            test += te
        return FoldPlan(scenario, fold_index, frozenset(train), frozenset(test), segment_level=True)
    if scenario == "across_subject":
        group = set(subject_groups([t.subject_id for t in trials], k, seed)[fold_index])
        test = {key for key in keys if key[0] in group}
    elif scenario == "across_elicitor":
        quadrant = QUADRANTS[fold_index]
        test = {t.key for t in trials if t.quadrant == quadrant}
    else:
        a, b = version_split(trials)
        train, test = (a, b) if fold_index == 0 else (b, a)
        return FoldPlan(scenario, fold_index, frozenset(train), frozenset(test))
    return FoldPlan(scenario, fold_index, frozenset(keys) - frozenset(test), frozenset(test))


@dataclass
class FoldData:
    plan: FoldPlan
    train: list[Sample]
    test: list[Sample]
    stats: ChannelStats
    skipped: list[tuple[int, int]] = field(default_factory=list)


def materialize(plan: FoldPlan, trials: Sequence[Trial], seq_len: int, hop: int) -> FoldData:
    """Standardize with training-side statistics and cut the fold's windows.

    Samples come out ordered by (subject, video, start).
    """
    ordered = sorted(trials, key=lambda t: t.key)
    if plan.segment_level:
        starts: dict[tuple[int, int], tuple[list[int], list[int]]] = {}
        for s, v, start in plan.train:
            starts.setdefault((s, v), ([], []))[0].append(start)
        for s, v, start in plan.test:
            starts.setdefault((s, v), ([], []))[1].append(start)
        fit_regions = [t.signals[:max(starts[t.key][0]) + seq_len]
                       for t in ordered if t.key in starts and starts[t.key][0]]
        stats = ChannelStats.from_arrays(fit_regions)
        train, test = [], []
        for t in ordered:
            if t.key not in starts:
                continue
            z = standardize(t, stats)
            train += make_windows(z, seq_len, hop, sorted(starts[t.key][0]))
            test += make_windows(z, seq_len, hop, sorted(starts[t.key][1]))
        return FoldData(plan, train, test, stats)

    train_trials = [t for t in ordered if t.key in plan.train]
    test_trials = [t for t in ordered if t.key in plan.test]
    if not train_trials:
        raise InputError(f"{plan.scenario} fold {plan.fold_index} has no training trials")
    stats = ChannelStats.from_arrays([t.signals for t in train_trials])
    skipped = [t.key for t in train_trials + test_trials if len(t) < seq_len]
    train = [s for t in train_trials for s in make_windows(standardize(t, stats), seq_len, hop)]
    test = [s for t in test_trials for s in make_windows(standardize(t, stats), seq_len, hop)]
    return FoldData(plan, train, test, stats, skipped)


def all_windows(trials: Sequence[Trial], seq_len: int, hop: int,
                stats: ChannelStats | None = None) -> tuple[list[Sample], ChannelStats]:
    ordered = sorted(trials, key=lambda t: t.key)
    if stats is None:
        stats = ChannelStats.from_arrays([t.signals for t in ordered])
    return [s for t in ordered for s in make_windows(standardize(t, stats), seq_len, hop)], stats


# -- file I/O -----------------------------------------------------------------------

def _read_header(path: Path, expected: Sequence[str]) -> None:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in header]
    for col, name in enumerate(expected):
        if col >= len(header) or header[col] != name:
            found = header[col] if col < len(header) else "<missing>"
            raise ParseError(f"{path}: row 1, column {col + 1}: expected {name!r}, found {found!r}")
    if len(header) != len(expected):
        raise ParseError(f"{path}: row 1: expected {len(expected)} columns, found {len(header)}")


def _locate_bad_row(path: Path, n_cols: int) -> str:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                return f"row {row_no}: expected {n_cols} columns, found {len(row)}"
            for col_no, cell in enumerate(row, start=1):
                try:
                    float(cell)
                except ValueError:
                    return f"row {row_no}, column {col_no}: not a number: {cell!r}"
    return "unparseable content"


def _read_table(path: Path, header: Sequence[str]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    _read_header(path, header)
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError:
        raise ParseError(f"{path}: {_locate_bad_row(path, len(header))}") from None
    if table.shape[0] == 0:
        raise ParseError(f"{path}: no data rows")
    if table.shape[1] != len(header):
        raise ParseError(f"{path}: expected {len(header)} columns, found {table.shape[1]}")
    steps = np.diff(table[:, 0])
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        raise ParseError(f"{path}: row {bad[0] + 3}, column 1 (time_ms): timestamps not increasing")
    return table


def load_trial(physio_path, annotation_path, subject_id: int = 0, video_id: int = 0,
               quadrant: str = QUADRANTS[0]) -> Trial:
    physio = _read_table(Path(physio_path), PHYSIO_HEADER)
    ann = _read_table(Path(annotation_path), ANNOTATION_HEADER)
    ratio = len(physio) / len(ann)
    if abs(ratio - SAMPLES_PER_ANNOTATION) > 1:
        raise ParseError(
            f"{physio_path}: column 1 (time_ms): {len(physio)} signal rows vs {len(ann)} annotation rows "
            f"(ratio {ratio:.2f}, expected {SAMPLES_PER_ANNOTATION} +- 1)"
        )
    for col, name in ((1, "valence"), (2, "arousal")):
        bad = np.flatnonzero(np.abs(ann[:, col]) > RAW_LIMIT)
        if bad.size:
            raise RangeError(f"{annotation_path}: row {bad[0] + 2}, column {col + 1} ({name}): "
                             f"value {ann[bad[0], col]} outside [-{RAW_LIMIT:g}, {RAW_LIMIT:g}]")
    return Trial(subject_id, video_id, quadrant, physio[:, 1:], scale_annotations(ann[:, 1:]),
                 ann[:, 0].copy(), physio[:, 0].copy())


def trial_paths(root, subject_id: int, video_id: int) -> tuple[Path, Path]:
    root = Path(root)
    name = f"sub{subject_id}_vid{video_id}.csv"
    return root / "physio" / name, root / "annotations" / name


def write_trial(trial: Trial, physio_path, annotation_path) -> None:
    physio_path, annotation_path = Path(physio_path), Path(annotation_path)
    physio_path.parent.mkdir(parents=True, exist_ok=True)
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(physio_path, np.column_stack([trial.signal_times, trial.signals]), delimiter=",",
               fmt=["%d"] + ["%.17g"] * len(CHANNELS), header=",".join(PHYSIO_HEADER), comments="")
    np.savetxt(annotation_path,
               np.column_stack([trial.annotation_times, unscale_annotations(trial.annotations)]),
               delimiter=",", fmt=["%d", "%.17g", "%.17g"], header=",".join(ANNOTATION_HEADER), comments="")


def write_dataset(trials: Sequence[Trial], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ordered = sorted(trials, key=lambda t: t.key)
    with open(root / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METADATA_HEADER)
        for t in ordered:
            w.writerow([t.subject_id, t.video_id, t.quadrant])
    for t in ordered:
        write_trial(t, *trial_paths(root, t.subject_id, t.video_id))
    return root


def load_dataset(root) -> list[Trial]:
    root = Path(root)
    meta = root / "metadata.csv"
    if not meta.exists():
        raise InputError(f"{root}: no metadata.csv")
    _read_header(meta, METADATA_HEADER)
    trials = []
    with open(meta, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{meta}: row {row_no}: expected 3 columns, found {len(row)}")
            try:
                subject, video = int(row[0]), int(row[1])
            except ValueError:
                raise ParseError(f"{meta}: row {row_no}: non-integer id") from None
            if row[2] not in QUADRANTS:
                raise ParseError(f"{meta}: row {row_no}, column 3: unknown quadrant {row[2]!r}")
            trials.append(load_trial(*trial_paths(root, subject, video), subject, video, row[2]))
    return sorted(trials, key=lambda t: t.key)


# -- synthetic data -------------------------------------------------------------------

def _latent_track(rng: np.random.Generator, high: bool, t: np.ndarray, duration: float,
                  subject_bias: float) -> np.ndarray:
    centre = (6.75 if high else 3.25) + subject_bias + rng.normal(0.0, 0.25)
    period = duration * rng.uniform(0.8, 1.5)
    swing = rng.uniform(0.6, 1.2)
    track = centre + swing * np.sin(2 * math.pi * t / period + rng.uniform(0, 2 * math.pi))
    return np.clip(track, SCORE_MIN, SCORE_MAX)


def synth_trial(seed: int, subject_id: int, video_id: int, quadrant: str, duration_s: float) -> Trial:
    """One synthetic trial whose signals are deterministic functions of a latent V-A track.

    With ``u = (score - 5) / 4.5``:

    * heart rate ``1.1 + 0.35 u_a`` Hz drives ecg (spike train) and bvp,
      whose amplitude is ``1 + 0.4 u_a``
    * emg_coru / emg_trap / emg_zygo are white noise with standard deviation
      ``0.25 - 0.15 u_v``, ``0.25 + 0.15 u_a``, ``0.25 + 0.15 u_v``
    * gsr level ``2 + 1.2 u_a``; skt level ``33 + 0.6 u_v``
    * respiration rate ``0.25 + 0.1 u_a`` Hz

    Each subject adds a per-channel gain in [0.9, 1.1] and a small offset.
    Annotations are the latent track sampled at 20 Hz.
    """
    subject_rng = np.random.default_rng([seed, subject_id])
    gain = subject_rng.uniform(0.9, 1.1, size=len(CHANNELS))
    offset = subject_rng.normal(0.0, 0.1, size=len(CHANNELS))
    bias_v, bias_a = subject_rng.normal(0.0, 0.25, size=2)
    rng = np.random.default_rng([seed, subject_id, video_id])

    n_sig = int(round(duration_s * SIGNAL_HZ))
    n_ann = int(round(duration_s * ANNOTATION_HZ))
    t_ann = np.arange(n_ann) / ANNOTATION_HZ
    valence = _latent_track(rng, quadrant.startswith("HV"), t_ann, duration_s, bias_v)
    arousal = _latent_track(rng, quadrant.endswith("HA"), t_ann, duration_s, bias_a)

    t_sig = np.arange(n_sig) / SIGNAL_HZ
    u_v = (np.interp(t_sig, t_ann, valence) - 5.0) / 4.5
    u_a = (np.interp(t_sig, t_ann, arousal) - 5.0) / 4.5
    noise = rng.normal(size=(n_sig, len(CHANNELS)))
    heart = 2 * math.pi * np.cumsum(1.1 + 0.35 * u_a) / SIGNAL_HZ + rng.uniform(0, 2 * math.pi)
    breath = 2 * math.pi * np.cumsum(0.25 + 0.1 * u_a) / SIGNAL_HZ + rng.uniform(0, 2 * math.pi)
    signals = np.column_stack([
        (1 + 0.2 * u_a) * np.exp(8.0 * (np.cos(heart) - 1.0)) + 0.05 * noise[:, 0],
        (1 + 0.4 * u_a) * np.sin(heart - 0.6) + 0.05 * noise[:, 1],
        (0.25 - 0.15 * u_v) * noise[:, 2],
        (0.25 + 0.15 * u_a) * noise[:, 3],
        (0.25 + 0.15 * u_v) * noise[:, 4],
        2.0 + 1.2 * u_a + 0.1 * np.sin(2 * math.pi * 0.05 * t_sig) + 0.01 * noise[:, 5],
        np.sin(breath) + 0.02 * noise[:, 6],
        33.0 + 0.6 * u_v + 0.01 * noise[:, 7],
    ])
    signals = signals * gain + offset
    return Trial(subject_id, video_id, quadrant, signals, np.column_stack([valence, arousal]),
                 np.arange(n_ann, dtype=np.float64) * (1000 // ANNOTATION_HZ),
                 np.arange(n_sig, dtype=np.float64))


def synth_dataset(seed: int, n_subjects: int, n_videos: int, duration_s: float) -> list[Trial]:
    """Subjects ``1..n_subjects`` each watch videos ``1..n_videos``; video ``v`` has
    quadrant ``QUADRANTS[(v - 1) % 4]``."""
    if n_subjects < 1 or n_videos < 1 or not duration_s > 0:
        raise ParameterError("n_subjects, n_videos and duration_s must be positive")
    return [synth_trial(seed, s, v, QUADRANTS[(v - 1) % 4], duration_s)
            for s in range(1, n_subjects + 1) for v in range(1, n_videos + 1)]
