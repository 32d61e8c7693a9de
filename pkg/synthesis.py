"""
Training corpus assembly: pseudo-anomalies from selected generator snapshots
plus the normal set, and optional augmentation of the normal class.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from gan import TRAIN_DTYPE, sample, sample_shape

logger = logging.getLogger(__name__)


class SynthesisError(ValueError):
    """The pseudo-anomaly corpus cannot be built from the given inputs."""


@dataclass
class LabeledDataset:
    """Samples with labels 0 (normal) / 1 (anomaly), optional frame index and provenance."""

    samples: np.ndarray
    labels: np.ndarray
    frame_index: np.ndarray = None
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.size != self.samples.shape[0]:
            raise ValueError(f"{self.labels.size} labels for {self.samples.shape[0]} samples")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 (normal) or 1 (anomaly)")
        if self.frame_index is not None:
            self.frame_index = np.asarray(self.frame_index, dtype=np.int64).ravel()
            if self.frame_index.size != self.labels.size:
                raise ValueError("frame_index length differs from sample count")
        if self.provenance and len(self.provenance) != self.labels.size:
            raise ValueError("provenance length differs from sample count")

    def __len__(self):
        return int(self.labels.size)

    @property
    def sample_shape(self):
        return tuple(self.samples.shape[1:])

    def counts(self):
        return {'normal': int(np.sum(self.labels == 0)), 'anomaly': int(np.sum(self.labels == 1))}

    @classmethod
    def normals(cls, samples, frame_index=None):
        samples = np.asarray(samples)
        return cls(samples=samples, labels=np.zeros(samples.shape[0], dtype=np.int64),
                   frame_index=frame_index,
                   provenance=[f"normal:{i}" for i in range(samples.shape[0])])


@dataclass(frozen=True)
class SynthesisConfig:
    m: int = None
    k: int = 4
    seed: int = 0
    target_balance: float = 1.0

    def __post_init__(self):
        if not 0 < self.target_balance <= 4:
            raise ValueError(f"target_balance must be in (0, 4], got {self.target_balance}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.m is not None and self.m * self.k < 1:
            raise ValueError(f"m * k must be >= 1, got m={self.m}, k={self.k}")

    def resolve_m(self, n_normals):
        """Samples per generator: explicit m, or ceil(balance * |T| / k)."""
        if self.m is not None:
            return self.m
        return max(1, math.ceil(self.target_balance * n_normals / self.k))


def _child_seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_outliers(selected, cfg, noise, n_normals=None):
    """m samples from each selected snapshot, all labeled 1."""
    if not selected:
        raise SynthesisError("no generator snapshots selected")
    if cfg.m is None and n_normals is None:
        raise SynthesisError("m is unset; pass n_normals to derive it from the class balance")
    m = cfg.resolve_m(n_normals)
    batches, provenance = [], []
    # one seed per position so a snapshot selected twice still yields distinct samples
    for snapshot, seed in zip(selected, _child_seeds(cfg.seed, len(selected))):
        batches.append(sample(snapshot, m, noise, seed))
        provenance += [f"generator:{snapshot.epoch}:{j}" for j in range(m)]
    samples = np.concatenate(batches, axis=0)
    logger.info(f"🧪 Generated {samples.shape[0]} pseudo-anomalies from epochs {[s.epoch for s in selected]}")
    return LabeledDataset(samples=samples, labels=np.ones(samples.shape[0], dtype=np.int64),
                          provenance=provenance)


def augment_normals(converged, count, noise, seed, regime=None, manifest=None):
    """count samples from a converged snapshot, labeled 0."""
    if regime is not None and getattr(regime, 'value', regime) != 'Inlier':
        message = (f"augmentation snapshot epoch {converged.epoch} is in the "
                   f"{getattr(regime, 'value', regime)} regime, not Inlier")
        logger.warning(f"⚠️ {message}")
        if manifest is not None:
            manifest.add_warning(message)
    if count == 0:
        empty = np.zeros((0, *sample_shape(converged.arch)), dtype=TRAIN_DTYPE)
        return LabeledDataset(samples=empty, labels=np.zeros(0, dtype=np.int64))
    samples = sample(converged, count, noise, seed)
    return LabeledDataset(samples=samples, labels=np.zeros(count, dtype=np.int64),
                          provenance=[f"augmented:{converged.epoch}:{j}" for j in range(count)])


def assemble(T, U, seed):
    """Concatenate normals and anomalies, then shuffle with a seed-fixed permutation."""
    if np.any(T.labels != 0):
        raise SynthesisError("label contamination: the normal set contains label-1 samples")
    if np.any(U.labels != 1):
        raise SynthesisError("label contamination: the anomaly set contains label-0 samples")
    if len(U) == 0:
        raise SynthesisError("cannot train binary detector without anomalies")
    if len(T) and T.sample_shape != U.sample_shape:
        raise SynthesisError(f"normal samples {T.sample_shape} and anomalies {U.sample_shape} differ in shape")

    samples = np.concatenate([T.samples.astype(TRAIN_DTYPE), U.samples.astype(TRAIN_DTYPE)], axis=0)
    labels = np.concatenate([T.labels, U.labels])
    provenance = (T.provenance or [f"normal:{i}" for i in range(len(T))]) + \
                 (U.provenance or [f"anomaly:{i}" for i in range(len(U))])
    order = np.random.default_rng(seed).permutation(labels.size)
    logger.info(f"📦 Assembled detector corpus: {len(T)} normals + {len(U)} anomalies")
    return LabeledDataset(samples=samples[order], labels=labels[order],
                          provenance=[provenance[i] for i in order])


def save_sample_grid(samples, path, columns=8):
    """PNG grid of image samples in [-1, 1], or a scatter for 2D points."""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    samples = np.asarray(samples)
    if samples.ndim == 2:
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(samples[:, 0], samples[:, 1], s=3)
        ax.set_aspect('equal')
        fig.savefig(path, format='png')
        plt.close(fig)
        return path

    count = min(len(samples), columns * columns)
    rows = max(1, math.ceil(count / columns))
    _, _, h, w = samples.shape
    grid = np.full((rows * h, columns * w), -1.0)
    for index in range(count):
        r, c = divmod(index, columns)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = samples[index, 0]
    plt.imsave(path, (grid + 1) / 2, cmap='gray', vmin=0, vmax=1, format='png')
    return path
