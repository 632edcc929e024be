"""Labeled image sequences: synthetic generation, disk layout, splits.

On disk a dataset is ``root/<class_name>/<sample_id>/frame_0001.pgm ...``.
Class indices follow the alphabetical order of the class directories
unless ``root/labels.json`` provides ``{"class_names": [...]}`` (and
optionally ``{"samples": {sample_id: class_name}}``).
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidConfigError, InvalidInputError
from .formats import read_pgm, write_pgm

MICRO_AMPLITUDE_SCALE = 0.25
MICRO_EXTRA_NOISE = 0.02
BACKGROUND = 0.2
_FRAME_RE = re.compile(r"^frame_(\d+)\.pgm$")


@dataclass(eq=False)
class SequenceSample:
    id: str
    frames: np.ndarray  # (n_frames, H, W) in [0, 1]
    label: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise InvalidInputError(f"sample {self.id}: need >= 2 frames of equal size")


@dataclass(eq=False)
class Dataset:
    samples: list[SequenceSample]
    class_names: list[str]

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise InvalidInputError(f"sample {s.id}: label {s.label} out of range")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], list(self.class_names))


@dataclass(frozen=True)
class SyntheticSpec:
    """Moving Gaussian blobs; class ``c`` drifts along angle ``2*pi*c/n_classes``.

    ``amplitudes`` are per-frame displacements in pixels, one per class
    (default ``0.5 + 0.05 c``).  The micro variant scales them by 0.25 and
    adds 0.02 to the noise level.
    """

    n_classes: int = 4
    samples_per_class: int = 40
    resolution: tuple[int, int] = (32, 32)
    frames: int = 16
    amplitudes: tuple[float, ...] | None = None
    intensity: tuple[float, float] = (0.6, 0.8)
    ratios: tuple[float, ...] | None = None
    noise_sigma: float = 0.01
    blob_sigma: float = 2.5
    start_jitter: float = 0.5
    angle_jitter: float = 0.15
    variant: str = "macro"
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.samples_per_class < 1 or self.frames < 2:
            raise InvalidConfigError("need >= 1 class, >= 1 sample per class and >= 2 frames")
        if self.variant not in ("macro", "micro"):
            raise InvalidConfigError(f"variant must be macro or micro, got {self.variant!r}")
        amps = self.class_amplitudes()
        if len(amps) != self.n_classes or len(set(amps)) != len(amps):
            raise InvalidConfigError("amplitudes must be one distinct value per class")
        if min(amps) < 0:
            raise InvalidConfigError("amplitudes must be >= 0")
        if self.ratios is not None and (len(self.ratios) != self.n_classes
                                        or min(self.ratios) <= 0):
            raise InvalidConfigError("ratios must be one positive value per class")
        lo, hi = self.intensity
        if not 0 <= lo <= hi <= 1 - BACKGROUND:
            raise InvalidConfigError(f"intensity range must lie in [0, {1 - BACKGROUND}]")
        if not 0 <= self.test_fraction < 1:
            raise InvalidConfigError("test_fraction must be in [0, 1)")
        h, w = self.resolution
        reach = (self.frames - 1) * max(amps) + self.start_jitter + 2 * self.blob_sigma
        if reach > min(h, w) / 2:
            raise InvalidConfigError(
                f"resolution {h}x{w} too small: blob travels up to {reach:.1f} px from centre")

    def class_amplitudes(self) -> tuple[float, ...]:
        amps = self.amplitudes
        if amps is None:
            amps = tuple(0.5 + 0.05 * c for c in range(self.n_classes))
        scale = MICRO_AMPLITUDE_SCALE if self.variant == "micro" else 1.0
        return tuple(float(a) * scale for a in amps)

    def class_counts(self) -> list[int]:
        ratios = self.ratios or (1.0,) * self.n_classes
        return [max(1, int(round(self.samples_per_class * r))) for r in ratios]

    @property
    def effective_noise(self) -> float:
        return self.noise_sigma + (MICRO_EXTRA_NOISE if self.variant == "micro" else 0.0)


def class_names_for(n_classes: int) -> list[str]:
    return [f"class{c:02d}" for c in range(n_classes)]


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so frames survive a PGM round trip exactly."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255) / 255.0


def blob_sequence(resolution, n_frames, start, velocity, peak, blob_sigma,
                  noise_sigma=0.0, rng=None) -> np.ndarray:
    """Frames of a Gaussian blob at ``start + t * velocity`` (row, col)."""
    h, w = resolution
    rows, cols = np.mgrid[0:h, 0:w]
    t = np.arange(n_frames)[:, None, None]
    cy = start[0] + t * velocity[0]
    cx = start[1] + t * velocity[1]
    frames = BACKGROUND + peak * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2)
                                        / (2 * blob_sigma ** 2))
    if noise_sigma > 0:
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape)
    return quantize(frames)


def stratified_split(labels, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(spec.seed)
    names = class_names_for(spec.n_classes)
    amps = spec.class_amplitudes()
    h, w = spec.resolution
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    samples = []
    for c, count in enumerate(spec.class_counts()):
        base_angle = 2 * math.pi * c / spec.n_classes
        for k in range(count):
            angle = base_angle + rng.uniform(-spec.angle_jitter, spec.angle_jitter)
            velocity = amps[c] * np.array([math.sin(angle), math.cos(angle)])
            start = centre + rng.uniform(-spec.start_jitter, spec.start_jitter, size=2)
            peak = rng.uniform(*spec.intensity)
            frames = blob_sequence(spec.resolution, spec.frames, start, velocity, peak,
                                   spec.blob_sigma, spec.effective_noise, rng)
            samples.append(SequenceSample(f"{names[c]}_{k:03d}", frames, c))
    full = Dataset(samples, names)
    train_idx, test_idx = stratified_split(full.labels, spec.test_fraction, rng)
    return full.subset(train_idx), full.subset(test_idx)


# ---------------------------------------------------------------- disk

def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    for s in dataset.samples:
        d = root / dataset.class_names[s.label] / s.id
        d.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(s.frames, start=1):
            write_pgm(d / f"frame_{t:04d}.pgm", frame)


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root does not exist")
    manifest = {}
    if (root / "labels.json").exists():
        try:
            manifest = json.loads((root / "labels.json").read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{root / 'labels.json'}: invalid JSON ({exc})") from None
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root}: no class directories")
    names = list(manifest.get("class_names", [p.name for p in class_dirs]))
    overrides = manifest.get("samples", {})
    samples, shape = [], None
    for cdir in class_dirs:
        sample_dirs = sorted(p for p in cdir.iterdir() if p.is_dir())
        if not sample_dirs:
            raise DataError(f"{cdir}: class directory has no samples")
        for sdir in sample_dirs:
            frames = _load_frames(sdir)
            if shape is None:
                shape = frames.shape[1:]
            elif frames.shape[1:] != shape:
                raise DataError(f"{sdir}: resolution {frames.shape[1:]} differs from {shape}")
            label_name = overrides.get(sdir.name, cdir.name)
            if label_name not in names:
                raise DataError(f"{sdir}: class {label_name!r} not in class list")
            samples.append(SequenceSample(sdir.name, frames, names.index(label_name)))
    return Dataset(samples, names)


def _load_frames(sdir: Path) -> np.ndarray:
    numbered = []
    for p in sdir.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    numbered.sort()
    if len(numbered) < 2:
        raise DataError(f"{sdir}: need at least 2 frames, found {len(numbered)}")
    expected = list(range(1, len(numbered) + 1))
    if [n for n, _ in numbered] != expected:
        missing = sorted(set(range(1, numbered[-1][0] + 1)) - {n for n, _ in numbered})
        raise DataError(f"{sdir}: missing frame(s) {missing}")
    frames = [read_pgm(p) for _, p in numbered]
    if len({f.shape for f in frames}) != 1:
        raise DataError(f"{sdir}: frames have mixed resolutions")
    return np.stack(frames)


# ---------------------------------------------------------------- summaries

@dataclass(frozen=True)
class ImbalanceProfile:
    counts: tuple[int, ...]
    ratio: float


def imbalance_profile(data) -> ImbalanceProfile:
    """Per-class counts and max/min ratio; accepts a Dataset or a count list."""
    if isinstance(data, Dataset):
        counts = np.bincount(data.labels, minlength=data.n_classes)
    else:
        counts = np.asarray(list(data), dtype=np.int64)
    if counts.size == 0 or counts.sum() == 0:
        raise InvalidInputError("imbalance_profile needs a non-empty dataset")
    present = counts[counts > 0]
    return ImbalanceProfile(tuple(int(c) for c in counts), float(present.max() / present.min()))


def kfold_indices(labels, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold ``(train_idx, test_idx)`` pairs."""
    labels = np.asarray(labels)
    if k < 2 or k > labels.size:
        raise InvalidConfigError(f"k must be in [2, {labels.size}], got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        fold_of[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    all_idx = np.arange(labels.size)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def with_variant(spec: SyntheticSpec, variant: str, **changes) -> SyntheticSpec:
    return replace(spec, variant=variant, **changes)
