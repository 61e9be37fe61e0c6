"""
Data Service - Trial storage, task relabelling and synthetic EEG generation

Trial file layout (little-endian):
    b"EEGT" | u32 version | u64 N | u64 channels | u64 T | f32 payload
with labels in a JSON sidecar ``<path>.labels.json``.
"""
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core.exceptions import EmptySelectionError, FormatError, ShapeError
from app.models.presets import (
    CATEGORIES,
    EXEMPLARS_PER_CATEGORY,
    NUM_EXEMPLARS,
    RECORDING_SAMPLE_RATE_HZ,
    RECORDING_TIME_FRAMES,
)
from app.models.schemas import DatasetSummary, ElectrodeMontage, TaskSpec

logger = logging.getLogger(__name__)

TRIAL_MAGIC = b"EEGT"
TRIAL_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


@dataclass
class TrialSet:
    """N x channels x T trials with their stimulus and subject labels."""

    trials: np.ndarray
    category_labels: np.ndarray
    exemplar_labels: np.ndarray
    subject_ids: np.ndarray
    sample_rate: float = RECORDING_SAMPLE_RATE_HZ
    targets: Optional[np.ndarray] = None
    task: Optional[str] = None

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float32)
        self.category_labels = np.asarray(self.category_labels, dtype=np.int64)
        self.exemplar_labels = np.asarray(self.exemplar_labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        if self.trials.ndim != 3:
            raise ShapeError(f"trials must be N x channels x T, got {self.trials.shape}")
        n = len(self.trials)
        for name in ("category_labels", "exemplar_labels", "subject_ids"):
            if len(getattr(self, name)) != n:
                raise FormatError(f"{name} has {len(getattr(self, name))} entries for {n} trials")
        if self.targets is not None and len(self.targets) != n:
            raise FormatError(f"targets has {len(self.targets)} entries for {n} trials")
        if n and (self.exemplar_labels.min() < 0 or self.exemplar_labels.max() >= NUM_EXEMPLARS):
            raise ValueError(f"exemplar labels must lie in [0, {NUM_EXEMPLARS})")
        if not np.array_equal(self.category_labels, self.exemplar_labels // EXEMPLARS_PER_CATEGORY):
            raise ValueError("category labels disagree with exemplar labels (category = exemplar // 12)")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def channels(self) -> int:
        return self.trials.shape[1]

    @property
    def time_frames(self) -> int:
        return self.trials.shape[2]

    def subset(self, index: np.ndarray) -> "TrialSet":
        return replace(
            self,
            trials=self.trials[index],
            category_labels=self.category_labels[index],
            exemplar_labels=self.exemplar_labels[index],
            subject_ids=self.subject_ids[index],
            targets=None if self.targets is None else self.targets[index],
        )


# ============================================
# FILE FORMAT
# ============================================

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".labels.json")


def write_array(array: np.ndarray, path: Union[str, Path]) -> Path:
    """Write an N x channels x T float32 payload with the EEGT header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, channels, t = array.shape
    header = _HEADER.pack(TRIAL_MAGIC, TRIAL_VERSION, n, channels, t)
    path.write_bytes(header + np.ascontiguousarray(array, dtype="<f4").tobytes())
    return path


def read_array(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != TRIAL_MAGIC:
        raise FormatError(f"{path}: not an EEGT file (bad magic)")
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, n, channels, t = _HEADER.unpack_from(blob)
    if version != TRIAL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = n * channels * t
    if len(blob) != _HEADER.size + 4 * count:
        raise FormatError(f"{path}: payload holds {len(blob) - _HEADER.size} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=_HEADER.size).reshape(n, channels, t).astype(np.float32)


def save_trials(trial_set: TrialSet, path: Union[str, Path]) -> Path:
    path = write_array(trial_set.trials, path)
    labels = {
        "category": trial_set.category_labels.tolist(),
        "exemplar": trial_set.exemplar_labels.tolist(),
        "subject": trial_set.subject_ids.tolist(),
        "sample_rate": trial_set.sample_rate,
    }
    _sidecar(path).write_text(json.dumps(labels))
    logger.info(f"Saved {len(trial_set)} trials to {path}")
    return path


def load_trials(path: Union[str, Path]) -> TrialSet:
    """Read a trial file and its label sidecar; nothing is returned on error."""
    path = Path(path)
    trials = read_array(path)
    sidecar = _sidecar(path)
    if not sidecar.exists():
        raise FormatError(f"{path}: missing label sidecar {sidecar.name}")
    try:
        labels = json.loads(sidecar.read_text())
        return TrialSet(
            trials=trials,
            category_labels=labels["category"],
            exemplar_labels=labels["exemplar"],
            subject_ids=labels["subject"],
            sample_rate=float(labels.get("sample_rate", RECORDING_SAMPLE_RATE_HZ)),
        )
    except (KeyError, json.JSONDecodeError) as e:
        raise FormatError(f"{sidecar}: malformed labels ({e})") from e


def save_meshes(meshes: np.ndarray, trial_set: TrialSet, path: Union[str, Path]) -> Path:
    """Mesh dump: N x 1 x M x M x T stored as EEGT extents (N, M*M, T) plus labels."""
    n, _, m1, m2, t = meshes.shape
    path = write_array(meshes.reshape(n, m1 * m2, t), path)
    _sidecar(path).write_text(json.dumps({
        "category": trial_set.category_labels.tolist(),
        "exemplar": trial_set.exemplar_labels.tolist(),
        "subject": trial_set.subject_ids.tolist(),
        "sample_rate": trial_set.sample_rate,
        "mesh_shape": [m1, m2],
    }))
    return path


def load_meshes(path: Union[str, Path]) -> np.ndarray:
    flat = read_array(path)
    n, cells, t = flat.shape
    side = int(round(np.sqrt(cells)))
    if side * side != cells:
        raise FormatError(f"{path}: {cells} cells do not form a square mesh")
    return flat.reshape(n, 1, side, side, t)


# ============================================
# TASKS
# ============================================

def task_selection(trial_set: TrialSet, task: Union[TaskSpec, str]) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of the task's trials and their 0-based targets."""
    spec = TaskSpec.from_id(task) if isinstance(task, str) else task
    if spec.categories is None:
        index = np.arange(len(trial_set))
    else:
        index = np.flatnonzero(np.isin(trial_set.category_labels, spec.categories))
    if len(index) == 0:
        raise EmptySelectionError(f"task {spec.task_id}: no trials of the required categories")

    if spec.label_field == "category":
        raw = trial_set.category_labels[index]
        classes = np.array(spec.categories) if spec.categories is not None else np.arange(len(CATEGORIES))
        targets = np.searchsorted(classes, raw)
    else:
        raw = trial_set.exemplar_labels[index]
        if spec.categories is None:
            targets = raw.copy()
        else:
            targets = raw - spec.categories[0] * EXEMPLARS_PER_CATEGORY
    return index, targets.astype(np.int64)


def apply_task(trial_set: TrialSet, task: Union[TaskSpec, str]) -> TrialSet:
    """Select the task's trials and attach 0-based targets; trial values are untouched."""
    spec = TaskSpec.from_id(task) if isinstance(task, str) else task
    index, targets = task_selection(trial_set, spec)
    selected = trial_set.subset(index)
    selected.targets = targets
    selected.task = spec.task_id
    logger.info(f"Task {spec.task_id}: {len(selected)} trials, {spec.num_classes} classes")
    return selected


# ============================================
# SYNTHETIC GENERATOR
# ============================================

def _blob_pattern(positions: np.ndarray, rng: np.random.Generator, blobs: int = 3, width: float = 0.45) -> np.ndarray:
    """Smooth scalp pattern: signed Gaussian bumps around random electrodes."""
    centers = positions[rng.choice(len(positions), size=blobs, replace=False)]
    weights = rng.normal(size=blobs)
    dist2 = ((positions[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    pattern = (np.exp(-dist2 / (2 * width ** 2)) * weights).sum(axis=1)
    return pattern / np.linalg.norm(pattern)


def _envelope(t: int, sample_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Two damped oscillations under an onset window, unit RMS."""
    time = np.arange(t) / sample_rate
    freqs = rng.uniform(2.0, 12.0, size=2)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    decay = rng.uniform(2.0, 8.0, size=2)
    wave = sum(np.exp(-decay[i] * time) * np.sin(2 * np.pi * freqs[i] * time + phases[i]) for i in range(2))
    wave = wave * np.sin(np.pi * (np.arange(t) + 0.5) / t) ** 0.5
    return wave / np.sqrt(np.mean(wave ** 2))


def synth_generate(
    montage: ElectrodeMontage,
    n_per_exemplar: int,
    snr: float,
    seed: int,
    n_subjects: int = 1,
    time_frames: int = RECORDING_TIME_FRAMES,
    amplitude_uv: float = 5.0,
    sample_rate: float = RECORDING_SAMPLE_RATE_HZ,
) -> TrialSet:
    """
    Balanced synthetic trials for all 72 exemplars.

    Each exemplar owns a unit-norm spatial pattern, half of whose energy is the
    category's shared pattern, and a fixed temporal envelope. ``snr`` is the
    signal-to-noise power ratio; ``float('inf')`` gives noiseless trials.
    """
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    if n_per_exemplar < 1 or n_subjects < 1:
        raise ValueError("need at least one trial per exemplar and one subject")
    rng = np.random.default_rng(seed)
    positions = montage.as_array()
    channels = montage.size

    category_patterns = np.stack([_blob_pattern(positions, rng) for _ in CATEGORIES])
    patterns = np.empty((NUM_EXEMPLARS, channels))
    envelopes = np.empty((NUM_EXEMPLARS, time_frames))
    for e in range(NUM_EXEMPLARS):
        shared = category_patterns[e // EXEMPLARS_PER_CATEGORY]
        own = _blob_pattern(positions, rng)
        own = own - np.dot(own, shared) * shared
        own /= np.linalg.norm(own)
        patterns[e] = np.sqrt(0.5) * (shared + own)
        envelopes[e] = _envelope(time_frames, sample_rate, rng)

    # mean power of every clean trial is amplitude_uv ** 2
    clean = amplitude_uv * np.sqrt(channels) * patterns[:, :, None] * envelopes[:, None, :]
    noise_std = 0.0 if np.isinf(snr) else amplitude_uv / np.sqrt(snr)

    exemplars = np.tile(np.repeat(np.arange(NUM_EXEMPLARS), n_per_exemplar), n_subjects)
    subjects = np.repeat(np.arange(n_subjects), NUM_EXEMPLARS * n_per_exemplar)
    trials = clean[exemplars]
    if noise_std > 0:
        trials = trials + rng.normal(scale=noise_std, size=trials.shape)

    logger.info(f"Synthesised {len(trials)} trials ({channels} channels, T={time_frames}, snr={snr})")
    return TrialSet(
        trials=trials.astype(np.float32),
        category_labels=exemplars // EXEMPLARS_PER_CATEGORY,
        exemplar_labels=exemplars,
        subject_ids=subjects,
        sample_rate=sample_rate,
    )


def dataset_summary(trial_set: TrialSet) -> DatasetSummary:
    """Class balance per label field plus shapes."""
    return DatasetSummary(
        trials=len(trial_set),
        channels=trial_set.channels,
        time_frames=trial_set.time_frames,
        sample_rate=trial_set.sample_rate,
        subjects={int(k): v for k, v in sorted(Counter(trial_set.subject_ids.tolist()).items())},
        categories={CATEGORIES[k]: v for k, v in sorted(Counter(trial_set.category_labels.tolist()).items())},
        exemplars={int(k): v for k, v in sorted(Counter(trial_set.exemplar_labels.tolist()).items())},
    )
