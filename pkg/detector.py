"""
Binary detector trained on normals plus generated anomalies.

Output column 0 is the normal class, column 1 the anomaly class. A sample is
Normal iff its normal-class probability is at least alpha.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from gan import TRAIN_DTYPE, TrainingDivergedError, infer_arch
from logging_config import log_epoch
from nn_core import (
    Conv2d, Dense, Flatten, LeakyReLU, Network, NonFiniteError, ShapeError, make_optimizer, optimizer_step,
    softmax,
)

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class DetectorError(ValueError):
    """Detector training or scoring precondition violated."""


class Verdict(str, Enum):
    NORMAL = 'Normal'
    ANOMALY = 'Anomaly'


@dataclass(frozen=True)
class DetectorConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    alpha: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        for name in ('lr', 'batch_size', 'epochs'):
            if getattr(self, name) <= 0:
                raise ValueError(f"DetectorConfig.{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class DetectorModel:
    network: Network
    arch: dict
    seed: int = 0
    epochs: int = 0
    final_loss: float = float('nan')
    loss_history: list = field(default_factory=list)

    @property
    def input_shape(self):
        if self.arch['kind'] == 'points':
            return (self.arch['dim'],)
        return (self.arch['channels'], self.arch['size'], self.arch['size'])


def build_detector(arch, rng, dtype=TRAIN_DTYPE):
    """Two dense layers for points; three conv blocks, dense and a two-way output for images."""
    if arch['kind'] == 'points':
        hidden = arch['hidden']
        return Network([
            Dense(arch['dim'], hidden, rng=rng, dtype=dtype, name='d_dense1'),
            LeakyReLU(0.2),
            Dense(hidden, 2, rng=rng, dtype=dtype, name='d_logits'),
        ], name='detector')

    width = arch['width']
    size = arch['size']
    s1 = (size + 2 - 4) // 2 + 1
    s2 = (s1 + 2 - 4) // 2 + 1
    return Network([
        Conv2d(arch['channels'], width, 4, stride=2, padding=1, rng=rng, dtype=dtype, name='d_conv1'),
        LeakyReLU(0.2),
        Conv2d(width, 2 * width, 4, stride=2, padding=1, rng=rng, dtype=dtype, name='d_conv2'),
        LeakyReLU(0.2),
        Conv2d(2 * width, 2 * width, 3, stride=1, padding=1, rng=rng, dtype=dtype, name='d_conv3'),
        LeakyReLU(0.2),
        Flatten(name='d_flatten'),
        Dense(2 * width * s2 * s2, 2, rng=rng, dtype=dtype, name='d_logits'),
    ], name='detector')


def bce_loss(p, y):
    """Binary cross-entropy -[y log p + (1-y) log(1-p)], p = predicted anomaly probability."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def train(data, cfg, seed, arch=None, width=16, hidden=64):
    """Minibatch SGD with momentum on the mean BCE; deterministic given seed."""
    counts = data.counts()
    if counts['normal'] == 0 or counts['anomaly'] == 0:
        raise DetectorError(f"detector needs both classes, got {counts}")
    samples = np.asarray(data.samples, dtype=TRAIN_DTYPE)
    labels = np.asarray(data.labels, dtype=np.int64)
    arch = arch or infer_arch(samples.shape[1:], width=width, hidden=hidden)

    init_rng, order_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    network = build_detector(arch, init_rng)
    optimizer = make_optimizer('sgd_momentum', network.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    model = DetectorModel(network=network, arch=dict(arch), seed=seed)

    logger.info(f"🚀 Detector training: {counts['normal']} normals, {counts['anomaly']} anomalies, "
                f"{cfg.epochs} epochs")
    batch = min(cfg.batch_size, len(labels))
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = order_rng.permutation(len(labels))
        total = 0.0
        try:
            for start in range(0, len(order), batch):
                idx = order[start:start + batch]
                logits, tape = network.forward(samples[idx], training=True)
                probs = softmax(logits)
                total += float(np.sum(bce_loss(probs[:, 1], labels[idx])))
                onehot = np.eye(2, dtype=logits.dtype)[labels[idx]]
                network.backward(tape, (probs - onehot) / len(idx))
                optimizer_step(optimizer, network.parameters(), network.gradients())
        except NonFiniteError as e:
            logger.error(f"❌ Detector training diverged at epoch {epoch}: {e}")
            raise TrainingDivergedError(f"non-finite values at epoch {epoch}: {e}", epoch, model.loss_history) from e
        epoch_loss = total / len(order)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite detector loss at epoch {epoch}", epoch, model.loss_history)
        model.loss_history.append(epoch_loss)
        log_epoch(logger, 'detector', {'epoch': epoch, 'bce': epoch_loss}, time.perf_counter() - started)

    model.epochs = cfg.epochs
    model.final_loss = model.loss_history[-1]
    logger.info(f"✅ Detector trained: final BCE {model.final_loss:.6f}")
    return model


def probabilities(model, x):
    """(N, 2) softmax output: column 0 normal, column 1 anomaly."""
    x = np.asarray(x, dtype=TRAIN_DTYPE)
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"detector expects samples of shape {model.input_shape}, got {tuple(x.shape[1:])}")
    return softmax(model.network.predict(x).astype(np.float64))


def score(model, x):
    """Normal-class probability per sample."""
    return probabilities(model, x)[:, 0]


def classify_scores(scores, alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return [Verdict.NORMAL if s >= alpha else Verdict.ANOMALY for s in np.atleast_1d(scores)]


def classify(model, x, alpha=0.5):
    return classify_scores(score(model, x), alpha)


def anomaly_scores(model, x, batch_size=1024):
    """1 - p_normal, computed in batches."""
    x = np.asarray(x)
    parts = [1.0 - score(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts) if parts else np.zeros(0)
