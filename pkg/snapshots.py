"""
Regime classification of generator snapshots and pseudo-anomaly generator selection.

An epoch i is judged by the drop of the smoothed generator loss over the next
h epochs, L = loss(i) - loss(i + h). Large |L| means the generator is still
far from the data (noise), small |L| means it is close to convergence
(boundary), negligible |L| means it already produces inliers.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from gan import EpochRecord

logger = logging.getLogger(__name__)

DEFAULT_H = 5


class SelectionError(ValueError):
    """Snapshot selection is impossible with the given trajectory or thresholds."""


class Regime(str, Enum):
    NOISE = 'Noise'
    BOUNDARY = 'Boundary'
    INLIER = 'Inlier'
    TRANSITIONAL = 'Transitional'


@dataclass
class LossTrajectory:
    records: list = field(default_factory=list)
    smoothing_window: int = 3

    def __post_init__(self):
        if self.smoothing_window < 1:
            raise ValueError(f"smoothing window must be >= 1, got {self.smoothing_window}")
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("epoch indices must be strictly increasing")

    def __len__(self):
        return len(self.records)

    @property
    def epochs(self):
        return [r.epoch for r in self.records]

    def losses(self):
        return np.array([r.loss_i for r in self.records], dtype=np.float64)

    def smoothed(self):
        """Centered moving average, truncated at the edges."""
        values = self.losses()
        half = self.smoothing_window // 2
        out = np.empty_like(values)
        for i in range(len(values)):
            lo, hi = max(0, i - half), min(len(values), i + half + 1)
            out[i] = values[lo:hi].mean()
        return out

    def same_losses(self, other):
        return ([(r.epoch, r.loss_i, r.loss_c) for r in self.records]
                == [(r.epoch, r.loss_i, r.loss_c) for r in other.records])


@dataclass(frozen=True)
class SelectionThresholds:
    eps1: float
    eps2: float
    eps3: float

    def __post_init__(self):
        if not self.eps1 > self.eps2 > self.eps3 > 0:
            raise ValueError(
                f"thresholds must satisfy eps1 > eps2 > eps3 > 0, got "
                f"({self.eps1}, {self.eps2}, {self.eps3})")


def _position(traj, epoch):
    try:
        return traj.epochs.index(epoch)
    except ValueError:
        raise SelectionError(f"epoch {epoch} is not in the trajectory") from None


def loss_delta(traj, i, h=DEFAULT_H):
    """Smoothed loss at epoch i minus smoothed loss at epoch i + h."""
    if len(traj) < h + 1:
        raise SelectionError(f"trajectory has {len(traj)} epochs, need at least {h + 1}")
    last = traj.epochs[-1]
    if i + h > last:
        raise SelectionError(f"epoch {i} + h={h} is beyond the last epoch {last}")
    smoothed = traj.smoothed()
    return float(smoothed[_position(traj, i)] - smoothed[_position(traj, i + h)])


def deltas(traj, h=DEFAULT_H):
    """(epoch, delta) for every epoch with a defined delta."""
    if len(traj) < h + 1:
        raise SelectionError(f"trajectory has {len(traj)} epochs, need at least {h + 1}")
    smoothed = traj.smoothed()
    position = {epoch: index for index, epoch in enumerate(traj.epochs)}
    return [(epoch, float(smoothed[position[epoch]] - smoothed[position[epoch + h]]))
            for epoch in traj.epochs if epoch + h in position]


def default_thresholds(traj, h=DEFAULT_H):
    """Thresholds at 50%, 10% and 2% of the largest |delta|."""
    l_max = max(abs(delta) for _, delta in deltas(traj, h))
    if l_max == 0:
        raise SelectionError("flat trajectory: every loss delta is zero, thresholds undefined")
    return SelectionThresholds(eps1=0.5 * l_max, eps2=0.1 * l_max, eps3=0.02 * l_max)


def classify_epoch(L, thr):
    magnitude = abs(L)
    if magnitude >= thr.eps1:
        return Regime.NOISE
    if magnitude >= thr.eps2:
        return Regime.TRANSITIONAL
    if magnitude >= thr.eps3:
        return Regime.BOUNDARY
    return Regime.INLIER


def regime_table(traj, thr, h=DEFAULT_H):
    """Rows (epoch, loss, delta, regime); delta and regime are None for the last h epochs."""
    defined = dict(deltas(traj, h))
    rows = []
    for record in traj.records:
        delta = defined.get(record.epoch)
        regime = classify_epoch(delta, thr) if delta is not None else None
        rows.append((record.epoch, record.loss_i, delta, regime))
    return rows


def _evenly_spaced(band, count):
    if count <= 0:
        return []
    if count == 1:
        return [band[(len(band) - 1) // 2]]
    positions = [math.floor(j * (len(band) - 1) / (count - 1) + 0.5) for j in range(count)]
    return [band[p] for p in positions]


def select_generators(traj, snapshots, thr, k=4, include_noise_fraction=0.25, h=DEFAULT_H):
    """
    Pick k snapshots: ceil(k * (1 - fraction)) spread evenly over the Boundary
    band, the rest over the Noise band. An empty Noise band hands its share
    to the Boundary band. Returned in epoch order.
    """
    if k < 1:
        raise SelectionError(f"k must be >= 1, got {k}")
    if not 0 <= include_noise_fraction <= 0.5:
        raise SelectionError(f"include_noise_fraction must be in [0, 0.5], got {include_noise_fraction}")

    labels = {epoch: classify_epoch(delta, thr) for epoch, delta in deltas(traj, h)}
    by_epoch = {snap.epoch: snap for snap in snapshots}
    boundary = [e for e in sorted(labels) if labels[e] is Regime.BOUNDARY and e in by_epoch]
    noise = [e for e in sorted(labels) if labels[e] is Regime.NOISE and e in by_epoch]
    if not boundary:
        raise SelectionError(
            "no Boundary epochs under the current thresholds; adjust eps2/eps3 "
            "(or override them in the run config) so that some epochs fall in [eps3, eps2)")

    n_boundary = math.ceil(k * (1 - include_noise_fraction))
    n_noise = k - n_boundary
    if n_noise and not noise:
        logger.warning(f"⚠️ Noise band is empty; taking all {k} generators from the Boundary band")
        n_boundary, n_noise = k, 0

    chosen = _evenly_spaced(boundary, n_boundary) + _evenly_spaced(noise, n_noise)
    chosen.sort()
    logger.info(f"📊 Selected generator epochs {chosen} "
                f"(boundary band {boundary[0]}..{boundary[-1]}, {len(noise)} noise epochs)")
    return [by_epoch[e] for e in chosen]


def write_trajectory_csv(traj, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch', 'loss_i', 'loss_c'])
        for r in traj.records:
            writer.writerow([r.epoch, repr(float(r.loss_i)), repr(float(r.loss_c))])


def read_trajectory_csv(path, smoothing_window=3):
    with open(path, newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    records = [EpochRecord(epoch=int(row['epoch']), loss_i=float(row['loss_i']),
                           loss_c=float(row['loss_c'])) for row in rows]
    return LossTrajectory(records=records, smoothing_window=smoothing_window)


def write_regime_table(rows, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch', 'loss', 'delta', 'regime'])
        for epoch, loss, delta, regime in rows:
            writer.writerow([epoch, repr(float(loss)),
                             '' if delta is None else repr(float(delta)),
                             '' if regime is None else regime.value])
