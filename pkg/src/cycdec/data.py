"""Trial sets: the MITR file format, window extraction, LOSO splitting and a
synthetic band-signature generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRIAL_MAGIC = b"MITR"
TRIAL_VERSION = 1
_HEADER = struct.Struct("<6I")  # version, N, C, T, K, sample_rate
_MOD = 1 << 64


class DataError(ValueError):
    pass


class TrialFormatError(ValueError):
    pass


class BoundsError(IndexError):
    pass


@dataclass
class TrialSet:
    trials: np.ndarray     # (N, C, T) float32
    labels: np.ndarray     # (N,) int
    subjects: np.ndarray   # (N,) int
    sample_rate: int = 250
    n_classes: int = 4

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.trials.shape[1]

    @property
    def n_times(self) -> int:
        return self.trials.shape[2]

    def validate(self):
        N = len(self.labels)
        if N == 0:
            raise DataError("trial set is empty")
        if self.trials.ndim != 3 or self.trials.shape[0] != N or self.subjects.shape != (N,):
            raise DataError(f"inconsistent shapes: trials {self.trials.shape}, "
                            f"labels {self.labels.shape}, subjects {self.subjects.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels outside [0, {self.n_classes})")
        missing = set(range(self.n_classes)) - set(np.unique(self.labels).tolist())
        if missing:
            raise DataError(f"classes {sorted(missing)} absent from the trial set")
        if not np.isfinite(self.trials).all():
            raise DataError("non-finite sample values")

    def label_histogram(self) -> dict:
        """subject id -> per-class trial counts."""
        return {int(s): np.bincount(self.labels[self.subjects == s], minlength=self.n_classes)
                for s in np.unique(self.subjects)}

    def subset(self, idx) -> "TrialSet":
        return TrialSet(self.trials[idx], self.labels[idx], self.subjects[idx],
                        self.sample_rate, self.n_classes)


# ----------------------------------------------------------------- MITR files

def trialset_bytes(ts: TrialSet) -> bytes:
    """MITR layout, little-endian: magic, six u32 header words (version, N, C,
    T, K, sample_rate), N u8 labels, N u8 subject ids, N*C*T f32 samples, then
    a u64 checksum = (sum of header words + sum of payload bytes) mod 2**64."""
    ts.validate()
    N, C, T = ts.trials.shape
    if ts.subjects.min() < 0 or ts.subjects.max() > 255 or ts.n_classes > 256:
        raise DataError("labels and subject ids must fit in one byte")
    words = (TRIAL_VERSION, N, C, T, ts.n_classes, int(ts.sample_rate))
    payload = (ts.labels.astype(np.uint8).tobytes() + ts.subjects.astype(np.uint8).tobytes()
               + np.ascontiguousarray(ts.trials, dtype="<f4").tobytes())
    checksum = (sum(words) + _byte_sum(payload)) % _MOD
    return TRIAL_MAGIC + _HEADER.pack(*words) + payload + struct.pack("<Q", checksum)


def _byte_sum(buf: bytes) -> int:
    return int(np.frombuffer(buf, dtype=np.uint8).sum(dtype=np.uint64))


def save_trialset(path, ts: TrialSet):
    Path(path).write_bytes(trialset_bytes(ts))


def parse_trialset(buf: bytes) -> TrialSet:
    if buf[:4] != TRIAL_MAGIC:
        raise TrialFormatError("bad magic at offset 0 (expected MITR)")
    if len(buf) < 4 + _HEADER.size:
        raise TrialFormatError(f"truncated header at offset {len(buf)}")
    words = _HEADER.unpack_from(buf, 4)
    version, N, C, T, K, rate = words
    if version != TRIAL_VERSION:
        raise TrialFormatError(f"unsupported version {version} at offset 4")
    start = 4 + _HEADER.size
    payload_len = 2 * N + 4 * N * C * T
    expected = start + payload_len + 8
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "oversized"
        raise TrialFormatError(f"{kind} file: {len(buf)} bytes, expected {expected} "
                               f"(offset {min(len(buf), expected)})")
    payload = buf[start:start + payload_len]
    (stored,) = struct.unpack_from("<Q", buf, start + payload_len)
    if (sum(words) + _byte_sum(payload)) % _MOD != stored:
        raise TrialFormatError(f"checksum mismatch at offset {start + payload_len}")
    if N == 0:
        raise DataError("trial file holds no trials")
    labels = np.frombuffer(payload, dtype=np.uint8, count=N)
    bad = np.flatnonzero(labels >= K)
    if bad.size:
        raise TrialFormatError(f"label {labels[bad[0]]} >= {K} at offset {start + bad[0]}")
    subjects = np.frombuffer(payload, dtype=np.uint8, count=N, offset=N)
    trials = np.frombuffer(payload, dtype="<f4", offset=2 * N).reshape(N, C, T)
    ts = TrialSet(trials.astype(np.float32), labels.astype(np.int64), subjects.astype(np.int64),
                  rate, K)
    ts.validate()
    return ts


def load_trialset(path) -> TrialSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"trial file not found: {path}")
    return parse_trialset(path.read_bytes())


# ----------------------------------------------------------------- windows and splits

def extract_mi_window(trial: np.ndarray, cue_sample: int, rate: float, seconds: float) -> np.ndarray:
    """Slice (C, T_full) to the `seconds`-long interval starting at the cue."""
    length = int(round(seconds * rate))
    if cue_sample < 0 or cue_sample + length > trial.shape[-1]:
        raise BoundsError(f"window [{cue_sample}, {cue_sample + length}) exceeds recording "
                          f"of {trial.shape[-1]} samples")
    return trial[..., cue_sample:cue_sample + length]


@dataclass
class Fold:
    test_subject: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class SplitPlan:
    folds: list = field(default_factory=list)


def stratified_holdout(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split indices 0..len-1 into (keep, held) with held ~ fraction per class.

    The held-out total is round(fraction * n); per-class quotas use largest
    remainders, so every class is within one trial of its exact share.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    counts = np.array([(labels == k).sum() for k in classes])
    exact = fraction * counts
    quota = np.floor(exact).astype(int)
    total = int(np.floor(fraction * len(labels) + 0.5))
    short = total - quota.sum()
    if short > 0:
        order = np.argsort(-(exact - quota), kind="stable")
        quota[order[:short]] += 1
    held = []
    for k, q in zip(classes, quota):
        idx = np.flatnonzero(labels == k)
        held.extend(rng.permutation(idx)[:q].tolist())
    held = np.sort(np.array(held, dtype=np.int64))
    keep = np.setdiff1d(np.arange(len(labels)), held)
    return keep, held


def loso_splits(ts: TrialSet, val_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """One fold per subject; the rest are split train/validation by class."""
    subjects = np.unique(ts.subjects)
    if len(subjects) < 2:
        raise DataError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    plan = SplitPlan()
    for s in subjects:
        test = np.flatnonzero(ts.subjects == s)
        if test.size == 0:
            raise DataError(f"subject {s} has no trials")
        pool = np.flatnonzero(ts.subjects != s)
        keep, held = stratified_holdout(ts.labels[pool], val_fraction, rng)
        plan.folds.append(Fold(int(s), pool[keep], pool[held], test))
    return plan


# ----------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 9
    trials_per_class: int = 72
    C: int = 22
    T: int = 750
    sample_rate: int = 250
    class_freqs: tuple = (8.0, 13.0, 19.0, 27.0)
    active_channels: int = 6
    amplitude: float = 1.0
    subject_gain_jitter: float = 0.2
    noise_std: float = 1.0
    rng_seed: int = 0

    def validate(self):
        f = np.asarray(self.class_freqs, dtype=float)
        if len(np.unique(f)) != len(f):
            raise DataError(f"class frequencies must be distinct: {self.class_freqs}")
        if (f <= 0).any() or (f >= self.sample_rate / 2).any():
            raise DataError(f"class frequencies must lie in (0, Nyquist={self.sample_rate / 2})")
        if not 1 <= self.active_channels <= self.C:
            raise DataError(f"active_channels must lie in [1, {self.C}]")
        if self.n_subjects < 1 or self.trials_per_class < 1:
            raise DataError("need at least one subject and one trial per class")


def subject_gains(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.rng_seed, 1])
    return np.abs(1.0 + cfg.subject_gain_jitter * rng.standard_normal(cfg.n_subjects))


def synth_generate(cfg: SynthConfig) -> TrialSet:
    """Class k is a sinusoid at class_freqs[k] on a fixed channel subset, scaled
    by a per-subject gain and a fixed spatial pattern, plus white noise."""
    cfg.validate()
    K = len(cfg.class_freqs)
    rng = np.random.default_rng([cfg.rng_seed, 0])
    channels = np.sort(rng.choice(cfg.C, cfg.active_channels, replace=False))
    pattern = rng.uniform(0.5, 1.0, cfg.active_channels)
    gains = subject_gains(cfg)
    t = np.arange(cfg.T) / cfg.sample_rate
    per_subject = K * cfg.trials_per_class
    N = cfg.n_subjects * per_subject
    trials = np.empty((N, cfg.C, cfg.T), dtype=np.float32)
    labels = np.tile(np.repeat(np.arange(K), cfg.trials_per_class), cfg.n_subjects)
    subjects = np.repeat(np.arange(cfg.n_subjects), per_subject)
    for i in range(N):
        k = labels[i]
        x = cfg.noise_std * rng.standard_normal((cfg.C, cfg.T))
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * cfg.class_freqs[k] * t + phase)
        x[channels] += cfg.amplitude * gains[subjects[i]] * pattern[:, None] * wave
        trials[i] = x
    return TrialSet(trials, labels, subjects, cfg.sample_rate, K)
