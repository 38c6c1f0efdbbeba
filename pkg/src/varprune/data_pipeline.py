"""Session telemetry ingestion, windowing, normalisation and participant splits.

Session CSV layout (one file per session)::

    timestamp,participant_id,game_id,arousal,<feature_1>,...,<feature_d>
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, IngestionError

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("timestamp", "participant_id", "game_id", "arousal")


@dataclass
class SessionTrace:
    participant_id: str
    game_id: str
    timestamps: np.ndarray
    features: np.ndarray
    arousal: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.timestamps), -1)
        self.arousal = np.asarray(self.arousal, dtype=np.float64)
        if self.arousal.shape[0] != self.features.shape[0]:
            raise DataError(f"{self.participant_id}: {self.features.shape[0]} feature rows but {self.arousal.shape[0]} labels")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"{self.participant_id}: timestamps must be strictly increasing")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.features.shape[1])]

    def __len__(self):
        return self.timestamps.shape[0]


@dataclass
class PreprocessConfig:
    window_seconds: float = 3.0
    overlap_seconds: float = 1.0
    label_shift_seconds: float = 1.0
    variance_threshold: float = 0.01
    normalize_arousal: bool = True

    def __post_init__(self):
        if not 0 <= self.overlap_seconds < self.window_seconds:
            raise ConfigError("need 0 <= overlap_seconds < window_seconds")
        if self.label_shift_seconds < 0:
            raise ConfigError("label_shift_seconds must be >= 0")
        if self.variance_threshold < 0:
            raise ConfigError("variance_threshold must be >= 0")
        for name in ("window_seconds", "overlap_seconds", "label_shift_seconds"):
            v = getattr(self, name)
            if v != int(v):
                raise ConfigError(f"{name} must be a whole number of seconds on the 1 Hz grid, got {v}")

    @property
    def window_steps(self) -> int:
        return int(self.window_seconds)

    @property
    def stride_steps(self) -> int:
        return int(self.window_seconds - self.overlap_seconds)

    @property
    def shift_steps(self) -> int:
        return int(self.label_shift_seconds)


@dataclass
class WindowedDataset:
    features: np.ndarray
    targets: np.ndarray
    group_ids: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, len(self.feature_names))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.group_ids = np.asarray(self.group_ids, dtype=str).reshape(-1)
        n = self.features.shape[0]
        if self.targets.shape[0] != n or self.group_ids.shape[0] != n:
            raise DataError("features, targets and group_ids must have equal length")
        if self.features.shape[1] != len(self.feature_names):
            raise DataError("feature_names does not match the feature width")

    def __len__(self):
        return self.features.shape[0]

    @property
    def groups(self) -> list[str]:
        return sorted(set(self.group_ids.tolist()))

    def subset(self, rows) -> "WindowedDataset":
        return WindowedDataset(self.features[rows], self.targets[rows], self.group_ids[rows], list(self.feature_names))

    def select_columns(self, columns: Sequence[int]) -> "WindowedDataset":
        cols = list(columns)
        return WindowedDataset(self.features[:, cols], self.targets, self.group_ids,
                               [self.feature_names[c] for c in cols])


@dataclass
class EnvironmentSplit:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset


@dataclass
class SyntheticConfig:
    n_participants: int = 20
    samples_per_participant: int = 300
    n_stable_features: int = 10
    n_spurious_features: int = 30
    noise_std: float = 0.5
    spurious_coeff_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_participants", "samples_per_participant", "n_stable_features", "n_spurious_features"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise_std < 0 or self.spurious_coeff_std < 0:
            raise ConfigError("standard deviations must be >= 0")


# -- ingestion ----------------------------------------------------------------

def _parse_float(text, path, row, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise IngestionError(path, row, f"column {column!r} is not a number: {text!r}") from None
    if math.isnan(value):
        raise IngestionError(path, row, f"column {column!r} is NaN")
    return value


def read_session_csv(path) -> SessionTrace:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(path, None, "empty file") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestionError(path, 1, f"missing required columns {missing}")
        feature_cols = [i for i, h in enumerate(header) if h not in REQUIRED_COLUMNS]
        if not feature_cols:
            raise IngestionError(path, 1, "no feature columns")
        idx = {c: header.index(c) for c in REQUIRED_COLUMNS}
        ts, feats, labels = [], [], []
        participant = game = None
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(path, row_no, f"expected {len(header)} cells, found {len(row)}")
            t = _parse_float(row[idx["timestamp"]], path, row_no, "timestamp")
            if ts and t <= ts[-1]:
                kind = "duplicate" if t == ts[-1] else "decreasing"
                raise IngestionError(path, row_no, f"{kind} timestamp {t}")
            pid, gid = row[idx["participant_id"]].strip(), row[idx["game_id"]].strip()
            if participant is None:
                participant, game = pid, gid
            elif (pid, gid) != (participant, game):
                raise IngestionError(path, row_no, "participant_id/game_id change within one session file")
            if not row[idx["arousal"]].strip():
                raise IngestionError(path, row_no, "arousal missing; label stream shorter than telemetry")
            labels.append(_parse_float(row[idx["arousal"]], path, row_no, "arousal"))
            feats.append([_parse_float(row[i], path, row_no, header[i]) for i in feature_cols])
            ts.append(t)
    if not ts:
        raise IngestionError(path, None, "no data rows")
    names = [header[i] for i in feature_cols]
    ts_a, f_a, y_a = resample_1hz(np.array(ts), np.array(feats), np.array(labels))
    return SessionTrace(participant, game, ts_a, f_a, y_a, names)


def resample_1hz(timestamps, features, arousal):
    """Nearest-sample selection onto a 1 Hz grid starting at the first timestamp.

    Ties go to the earlier sample.
    """
    t0 = timestamps[0]
    n = int(math.floor(timestamps[-1] - t0 + 1e-9)) + 1
    grid = t0 + np.arange(n, dtype=np.float64)
    right = np.searchsorted(timestamps, grid, side="left").clip(0, len(timestamps) - 1)
    left = (right - 1).clip(0, None)
    pick = np.where(np.abs(timestamps[left] - grid) <= np.abs(timestamps[right] - grid), left, right)
    return grid, features[pick], arousal[pick]


def load_sessions(path) -> list[SessionTrace]:
    """Read one session CSV, or every ``*.csv`` in a directory (sorted by name)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data path {path} does not exist")
    files = [path] if path.is_file() else sorted(path.glob("*.csv"))
    if not files:
        raise DataError(f"no CSV files under {path}")
    sessions = [read_session_csv(f) for f in files]
    names = sessions[0].feature_names
    for f, s in zip(files, sessions):
        if s.feature_names != names:
            raise IngestionError(f, 1, "feature columns differ from the first session")
    return sessions


def write_session_csv(trace: SessionTrace, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*REQUIRED_COLUMNS, *trace.feature_names])
        for t, y, row in zip(trace.timestamps, trace.arousal, trace.features):
            w.writerow([repr(float(t)), trace.participant_id, trace.game_id, repr(float(y)),
                        *(repr(float(v)) for v in row)])


# -- windowing and labels -----------------------------------------------------

def window_count(length: int, window: int, stride: int) -> int:
    if length < window:
        return 0
    return (length - window) // stride + 1


def window_features(trace: SessionTrace, cfg: PreprocessConfig):
    """Concatenate per-step feature vectors inside each sliding window.

    Returns ``(vectors, spans, complete)`` where ``spans`` holds ``(start, stop)``
    step indices and ``complete`` is False when the trace is shorter than one
    window.
    """
    w, stride = cfg.window_steps, cfg.stride_steps
    d = trace.features.shape[1]
    n = window_count(len(trace), w, stride)
    if n == 0:
        log.warning("session %s/%s shorter than one window (%d < %d)",
                    trace.participant_id, trace.game_id, len(trace), w)
        return np.empty((0, w * d)), [], False
    starts = np.arange(n) * stride
    vectors = np.stack([trace.features[s:s + w].reshape(-1) for s in starts])
    spans = [(int(s), int(s) + w) for s in starts]
    return vectors, spans, True


def shift_labels(arousal, shift: int) -> np.ndarray:
    """Value reported at step t becomes the annotation at t + shift; tail dropped."""
    arousal = np.asarray(arousal, dtype=np.float64)
    return arousal[shift:] if shift > 0 else arousal.copy()


def normalize_trace(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def shift_and_average_labels(trace: SessionTrace, windows, cfg: PreprocessConfig):
    """Per-window mean of the shifted label stream.

    Returns ``(targets, keep)`` where ``keep`` flags windows that still hold at
    least one label after the shift. Arousal is min-max normalised per trace
    after shifting when ``cfg.normalize_arousal`` is set.
    """
    shifted = shift_labels(trace.arousal, cfg.shift_steps)
    if cfg.normalize_arousal:
        shifted = normalize_trace(shifted)
    targets, keep = [], []
    for start, stop in windows:
        if start < 0 or stop > len(trace):
            raise DataError("window span does not belong to this trace")
        part = shifted[start:min(stop, shifted.shape[0])]
        keep.append(part.size > 0)
        targets.append(float(part.mean()) if part.size else math.nan)
    return np.array(targets), np.array(keep, dtype=bool)


def window_session(trace: SessionTrace, cfg: PreprocessConfig) -> WindowedDataset:
    vectors, spans, _ = window_features(trace, cfg)
    names = [f"{name}@t{k}" for k in range(cfg.window_steps) for name in trace.feature_names]
    if not spans:
        return WindowedDataset(np.empty((0, len(names))), np.empty(0), np.empty(0, dtype=str), names)
    targets, keep = shift_and_average_labels(trace, spans, cfg)
    return WindowedDataset(vectors[keep], targets[keep], np.full(int(keep.sum()), trace.participant_id), names)


def concat_datasets(parts: Sequence[WindowedDataset]) -> WindowedDataset:
    parts = list(parts)
    if not parts:
        raise DataError("nothing to concatenate")
    return WindowedDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.targets for p in parts]),
        np.concatenate([p.group_ids for p in parts]),
        list(parts[0].feature_names),
    )


# -- normalisation and filtering ----------------------------------------------

def fit_minmax(dataset: WindowedDataset):
    if len(dataset) == 0:
        raise DataError("cannot normalise an empty dataset")
    return dataset.features.min(axis=0), dataset.features.max(axis=0)


def apply_minmax(dataset: WindowedDataset, lo, hi) -> WindowedDataset:
    """Map columns onto [0, 1] with the given bounds; constant columns go to 0."""
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    x = (dataset.features - lo) / safe
    x = np.where(span > 0, x, 0.0)
    x = np.clip(x, 0.0, 1.0)
    return replace(dataset, features=x)


def minmax_normalize(dataset: WindowedDataset):
    """Normalise with the dataset's own column bounds. Returns ``(dataset, (min, max))``."""
    lo, hi = fit_minmax(dataset)
    return apply_minmax(dataset, lo, hi), (lo, hi)


def variance_filter(dataset: WindowedDataset, threshold: float) -> list[int]:
    """Indices of columns whose population variance is at least ``threshold``."""
    if len(dataset) == 0:
        raise DataError("cannot filter an empty dataset")
    var = dataset.features.var(axis=0)
    keep = [int(i) for i in np.flatnonzero(var >= threshold)]
    if not keep:
        raise DataError(f"variance filter at threshold {threshold} removed every feature")
    return keep


# -- splits -------------------------------------------------------------------

def _participants(sessions) -> list[str]:
    return sorted({s.participant_id for s in sessions})


def split_participants(participants: Sequence[str], ratios, seed: int):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    people = sorted(set(participants))
    n = len(people)
    if n < 3:
        raise DataError(f"need at least 3 participants to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [people[i] for i in order]
    n_train = int(round(ratios[0] * n))
    n_val = int(round((ratios[0] + ratios[1]) * n)) - n_train
    # every partition gets at least one participant
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def split_by_participant(sessions: Sequence[SessionTrace], ratios=(0.6, 0.2, 0.2), seed: int = 0,
                         cfg: PreprocessConfig | None = None) -> EnvironmentSplit:
    """Participant-disjoint windowed train/val/test sets (raw, unnormalised features)."""
    cfg = cfg or PreprocessConfig()
    train_p, val_p, test_p = split_participants(_participants(sessions), ratios, seed)
    windowed = [window_session(s, cfg) for s in sessions]

    def gather(people):
        chosen = set(people)
        parts = [w for s, w in zip(sessions, windowed) if s.participant_id in chosen]
        return concat_datasets(parts)

    return EnvironmentSplit(gather(train_p), gather(val_p), gather(test_p))


@dataclass
class FeatureTransform:
    """Training-partition statistics reused for validation and test data."""

    lo: np.ndarray
    hi: np.ndarray
    keep: list[int]
    feature_names: list[str]

    def apply(self, dataset: WindowedDataset) -> WindowedDataset:
        return apply_minmax(dataset, self.lo, self.hi).select_columns(self.keep)

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist(), "keep": self.keep,
                "feature_names": self.feature_names}


def preprocess_split(split: EnvironmentSplit, cfg: PreprocessConfig):
    """Fit min-max and the variance filter on train, apply to all three partitions."""
    for name in ("train", "val", "test"):
        if len(getattr(split, name)) == 0:
            raise DataError(f"{name} partition has no windows")
    normed, (lo, hi) = minmax_normalize(split.train)
    keep = variance_filter(normed, cfg.variance_threshold)
    tf = FeatureTransform(lo, hi, keep, list(split.train.feature_names))
    out = EnvironmentSplit(normed.select_columns(keep), tf.apply(split.val), tf.apply(split.test))
    return out, tf


def prepare(sessions, cfg: PreprocessConfig, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> EnvironmentSplit:
    split, _ = preprocess_split(split_by_participant(sessions, ratios, seed, cfg), cfg)
    return split


# -- synthetic multi-environment data -----------------------------------------

@dataclass
class SyntheticTruth:
    stable_coef: np.ndarray
    spurious_coef: dict[str, np.ndarray]
    offset: float  # y_squashed = (y_raw - offset) / scale
    scale: float


def _participant_name(i: int, n: int) -> str:
    return f"p{i:0{max(2, len(str(n - 1)))}d}"


def _draw_synthetic(cfg: SyntheticConfig):
    rng = np.random.default_rng(cfg.seed)
    beta_s = rng.normal(0.0, 1.0, cfg.n_stable_features)
    raw = {}
    spurious = {}
    for i in range(cfg.n_participants):
        pid = _participant_name(i, cfg.n_participants)
        beta_u = rng.normal(0.0, 1.0, cfg.n_spurious_features) * cfg.spurious_coeff_std
        xs = rng.normal(0.0, 1.0, (cfg.samples_per_participant, cfg.n_stable_features))
        xu = rng.normal(0.0, 1.0, (cfg.samples_per_participant, cfg.n_spurious_features))
        eps = rng.normal(0.0, 1.0, cfg.samples_per_participant) * cfg.noise_std
        raw[pid] = (xs, xu, xs @ beta_s + xu @ beta_u + eps)
        spurious[pid] = beta_u
    ys = np.concatenate([v[2] for v in raw.values()])
    lo, hi = float(ys.min()), float(ys.max())
    scale = hi - lo if hi > lo else 1.0
    return raw, SyntheticTruth(beta_s, spurious, lo, scale)


def generate_synthetic(cfg: SyntheticConfig) -> list[SessionTrace]:
    """One 1 Hz session per participant with shared stable and per-participant spurious effects."""
    raw, truth = _draw_synthetic(cfg)
    names = [f"stable_{k}" for k in range(cfg.n_stable_features)]
    names += [f"spurious_{k}" for k in range(cfg.n_spurious_features)]
    sessions = []
    for pid, (xs, xu, y) in raw.items():
        sessions.append(SessionTrace(
            participant_id=pid,
            game_id="synthetic",
            timestamps=np.arange(cfg.samples_per_participant, dtype=np.float64),
            features=np.hstack([xs, xu]),
            arousal=(y - truth.offset) / truth.scale,
            feature_names=names,
        ))
    return sessions


def synthetic_truth(cfg: SyntheticConfig) -> SyntheticTruth:
    return _draw_synthetic(cfg)[1]


def write_sessions(sessions: Sequence[SessionTrace], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in sessions:
        p = out / f"{s.participant_id}_{s.game_id}.csv"
        write_session_csv(s, p)
        paths.append(p)
    return paths


# -- windowed dataset files ---------------------------------------------------

def write_dataset(dataset: WindowedDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "target", *dataset.feature_names])
        for g, t, row in zip(dataset.group_ids, dataset.targets, dataset.features):
            w.writerow([g, repr(float(t)), *(repr(float(v)) for v in row)])


def read_dataset(path) -> WindowedDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset {path} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(path, None, "empty file") from None
        if header[:2] != ["group_id", "target"]:
            raise IngestionError(path, 1, "expected header group_id,target,<features>")
        groups, targets, feats = [], [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(path, row_no, f"expected {len(header)} cells, found {len(row)}")
            groups.append(row[0])
            targets.append(_parse_float(row[1], path, row_no, "target"))
            feats.append([_parse_float(v, path, row_no, header[i + 2]) for i, v in enumerate(row[2:])])
    names = header[2:]
    return WindowedDataset(np.array(feats, dtype=np.float64).reshape(len(targets), len(names)),
                           np.array(targets), np.array(groups, dtype=str), names)
