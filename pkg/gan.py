"""
WGAN training of the irregularity generator and its critic on normal data.

The generator maps Gaussian latent vectors to samples; the critic emits an
unbounded realness score (no sigmoid) and is kept Lipschitz by weight
clipping. A snapshot of the generator is kept after every epoch; early
snapshots later serve as pseudo-anomaly generators.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from evaluation import energy_distance, median_smooth
from logging_config import log_epoch
from nn_core import (
    BatchNorm2d, Conv2d, Conv2dTranspose, Dense, Flatten, LeakyReLU, Network, NonFiniteError, Tanh,
    clip_weights, make_optimizer, optimizer_step,
)

logger = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; carries the epoch and the records collected so far."""

    def __init__(self, message, epoch, records=None):
        super().__init__(message)
        self.epoch = epoch
        self.records = list(records or [])


@dataclass(frozen=True)
class NoiseSpec:
    dim: int = 64
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"noise dim must be >= 1, got {self.dim}")
        if self.std <= 0:
            raise ValueError(f"noise stddev must be > 0, got {self.std}")

    def draw(self, rng, count, dtype=TRAIN_DTYPE):
        z = rng.standard_normal((count, self.dim))
        return (self.mean + self.std * z).astype(dtype)


@dataclass(frozen=True)
class GanConfig:
    lr: float = 0.0001
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 25
    critic_steps_per_gen: int = 5
    clip_c: float = 0.01

    def __post_init__(self):
        for name in ('lr', 'beta1', 'beta2', 'batch_size', 'epochs', 'critic_steps_per_gen', 'clip_c'):
            if getattr(self, name) <= 0:
                raise ValueError(f"GanConfig.{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss_i: float
    loss_c: float
    wall_time: float = 0.0


@dataclass(frozen=True)
class ModelSnapshot:
    """Generator parameters after one epoch; immutable once emitted."""

    epoch: int
    state: dict = field(repr=False)
    loss: float
    arch: dict
    noise_dim: int

    def __post_init__(self):
        for value in self.state.values():
            value.setflags(write=False)


def infer_arch(sample_shape, width=16, hidden=64):
    """Architecture description for a sample shape: (d,) points or (C, H, W) images."""
    sample_shape = tuple(int(v) for v in sample_shape)
    if len(sample_shape) == 1:
        return {'kind': 'points', 'dim': sample_shape[0], 'hidden': hidden}
    if len(sample_shape) == 3:
        channels, height, width_px = sample_shape
        if height != width_px:
            raise ValueError(f"image samples must be square, got {sample_shape}")
        return {'kind': 'image', 'channels': channels, 'size': height, 'width': width}
    raise ValueError(f"unsupported sample shape {sample_shape}")


def sample_shape(arch):
    if arch['kind'] == 'points':
        return (arch['dim'],)
    return (arch['channels'], arch['size'], arch['size'])


def _final_upsample(size):
    """Base grid, kernel and padding so that 4*base upsampled lands exactly on size."""
    base = math.ceil(size / 4)
    kernel = 3 if (4 * base + 2 - size) % 2 == 0 else 4
    padding = (4 * base - 1 + kernel - size) // 2
    return base, kernel, padding


def build_generator(arch, noise_dim, rng, dtype=TRAIN_DTYPE):
    if arch['kind'] == 'points':
        hidden = arch['hidden']
        layers = [
            Dense(noise_dim, hidden, rng=rng, dtype=dtype, name='g_dense1'),
            LeakyReLU(0.2),
            Dense(hidden, hidden, rng=rng, dtype=dtype, name='g_dense2'),
            LeakyReLU(0.2),
            Dense(hidden, arch['dim'], rng=rng, dtype=dtype, name='g_out'),
            Tanh(),
        ]
        return Network(layers, name='generator')

    width = arch['width']
    base, kernel, padding = _final_upsample(arch['size'])
    c0 = 4 * width
    layers = [
        Dense(noise_dim, c0 * base * base, weight_std=0.02, rng=rng, dtype=dtype, name='g_project'),
        Flatten(out_shape=(c0, base, base), name='g_reshape'),
        Conv2dTranspose(c0, 2 * width, 4, stride=2, padding=1, weight_std=0.02, rng=rng, dtype=dtype, name='g_up1'),
        BatchNorm2d(2 * width, dtype=dtype, name='g_bn1'),
        LeakyReLU(0.2),
        Conv2dTranspose(2 * width, width, 4, stride=2, padding=1, weight_std=0.02, rng=rng, dtype=dtype, name='g_up2'),
        BatchNorm2d(width, dtype=dtype, name='g_bn2'),
        LeakyReLU(0.2),
        Conv2dTranspose(width, arch['channels'], kernel, stride=1, padding=padding,
                        weight_std=0.02, rng=rng, dtype=dtype, name='g_out'),
        Tanh(),
    ]
    return Network(layers, name='generator')


def build_critic(arch, rng, dtype=TRAIN_DTYPE):
    if arch['kind'] == 'points':
        hidden = arch['hidden']
        layers = [
            Dense(arch['dim'], hidden, rng=rng, dtype=dtype, name='c_dense1'),
            LeakyReLU(0.2),
            Dense(hidden, hidden, rng=rng, dtype=dtype, name='c_dense2'),
            LeakyReLU(0.2),
            Dense(hidden, 1, rng=rng, dtype=dtype, name='c_score'),
        ]
        return Network(layers, name='critic')

    width = arch['width']
    size = arch['size']
    s1 = (size + 2 - 4) // 2 + 1
    s2 = (s1 + 2 - 4) // 2 + 1
    layers = [
        Conv2d(arch['channels'], width, 4, stride=2, padding=1, weight_std=0.02, rng=rng, dtype=dtype, name='c_conv1'),
        LeakyReLU(0.2),
        Conv2d(width, 2 * width, 4, stride=2, padding=1, weight_std=0.02, rng=rng, dtype=dtype, name='c_conv2'),
        LeakyReLU(0.2),
        Conv2d(2 * width, 2 * width, 3, stride=1, padding=1, weight_std=0.02, rng=rng, dtype=dtype, name='c_conv3'),
        LeakyReLU(0.2),
        Flatten(name='c_flatten'),
        Dense(2 * width * s2 * s2, 1, weight_std=0.02, rng=rng, dtype=dtype, name='c_score'),
    ]
    return Network(layers, name='critic')


def _check_scores(real_scores, fake_scores):
    real = np.asarray(real_scores, dtype=np.float64).ravel()
    fake = np.asarray(fake_scores, dtype=np.float64).ravel()
    if real.size == 0 or fake.size == 0:
        raise ValueError("critic score vectors must be non-empty")
    return real, fake


def generator_loss(real_scores, fake_scores):
    """mean(f(x)) - mean(f(I(z))); only the fake term depends on the generator."""
    real, fake = _check_scores(real_scores, fake_scores)
    return float(real.mean() - fake.mean())


def critic_loss(real_scores, fake_scores):
    """mean(f(I(z))) - mean(f(x)); minimizing it maximizes the Wasserstein estimate."""
    real, fake = _check_scores(real_scores, fake_scores)
    return float(fake.mean() - real.mean())


def _seed_streams(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


class _BatchStream:
    """Endless stream of shuffled minibatches; reshuffles on exhaustion."""

    def __init__(self, data, batch_size, rng):
        self.data = data
        self.batch_size = batch_size
        self.rng = rng
        self._order = self.rng.permutation(len(data))
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.data[idx]


def train(normals, cfg, noise, seed, arch=None, on_epoch=None):
    """
    Train generator and critic on normal samples only.

    Returns (LossTrajectory, snapshots) with one snapshot per epoch. Each
    epoch runs max(1, batches_per_pass // critic_steps) generator updates,
    each preceded by critic_steps critic updates with weight clipping.
    """
    from snapshots import LossTrajectory

    samples = getattr(normals, 'samples', normals)
    labels = getattr(normals, 'labels', None)
    if labels is not None and np.any(np.asarray(labels) != 0):
        raise ValueError("GAN training data must contain only normal (label 0) samples")
    samples = np.asarray(samples, dtype=TRAIN_DTYPE)
    if cfg.batch_size > len(samples):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training-set size {len(samples)}")
    arch = arch or infer_arch(samples.shape[1:])

    init_rng, data_rng, noise_rng = _seed_streams(seed, 3)
    generator = build_generator(arch, noise.dim, init_rng)
    critic = build_critic(arch, init_rng)
    clip_weights(critic.parameters(), cfg.clip_c)
    g_opt = make_optimizer('adam', generator.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    c_opt = make_optimizer('adam', critic.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    stream = _BatchStream(samples, cfg.batch_size, data_rng)
    batches_per_pass = max(1, len(samples) // cfg.batch_size)
    gen_steps = max(1, batches_per_pass // cfg.critic_steps_per_gen)
    m = cfg.batch_size

    logger.info(f"🚀 GAN training: {len(samples)} normals, arch={arch['kind']}, "
                f"{cfg.epochs} epochs x {gen_steps} generator steps")

    records = []
    snapshots = []
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        loss_i_values, loss_c_values = [], []
        try:
            for _ in range(gen_steps):
                for _ in range(cfg.critic_steps_per_gen):
                    real = stream.next()
                    fake, _ = generator.forward(noise.draw(noise_rng, m), training=True)

                    real_scores, real_tape = critic.forward(real, training=True)
                    critic.backward(real_tape, np.full_like(real_scores, -1.0 / m))
                    real_grads = [g.copy() for g in critic.gradients()]
                    fake_scores, fake_tape = critic.forward(fake, training=True)
                    critic.backward(fake_tape, np.full_like(fake_scores, 1.0 / m))
                    grads = [rg + fg for rg, fg in zip(real_grads, critic.gradients())]
                    optimizer_step(c_opt, critic.parameters(), grads)
                    clip_weights(critic.parameters(), cfg.clip_c)
                    loss_c_values.append(critic_loss(real_scores, fake_scores))

                fake, g_tape = generator.forward(noise.draw(noise_rng, m), training=True)
                fake_scores, c_tape = critic.forward(fake, training=True)
                d_fake = critic.backward(c_tape, np.full_like(fake_scores, -1.0 / m))
                generator.backward(g_tape, d_fake)
                optimizer_step(g_opt, generator.parameters(), generator.gradients())
                real_scores = critic.predict(real)
                loss_i_values.append(generator_loss(real_scores, fake_scores))
        except NonFiniteError as e:
            logger.error(f"❌ GAN training diverged at epoch {epoch}: {e}")
            raise TrainingDivergedError(f"non-finite values at epoch {epoch}: {e}", epoch, records) from e

        record = EpochRecord(epoch=epoch, loss_i=float(np.mean(loss_i_values)),
                             loss_c=float(np.mean(loss_c_values)),
                             wall_time=time.perf_counter() - started)
        if not (math.isfinite(record.loss_i) and math.isfinite(record.loss_c)):
            logger.error(f"❌ Non-finite GAN loss at epoch {epoch}")
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch, records)
        records.append(record)
        snapshot = ModelSnapshot(epoch=epoch, state=generator.state_dict(), loss=record.loss_i,
                                 arch=dict(arch), noise_dim=noise.dim)
        snapshots.append(snapshot)
        log_epoch(logger, 'gan', {'epoch': epoch, 'loss_I': record.loss_i, 'loss_C': record.loss_c},
                  record.wall_time)
        if on_epoch is not None:
            on_epoch(record, snapshot)

    logger.info(f"✅ GAN training finished: {len(snapshots)} snapshots")
    return LossTrajectory(records=records), snapshots


def restore_generator(snapshot):
    generator = build_generator(snapshot.arch, snapshot.noise_dim, np.random.default_rng(0))
    generator.load_state_dict(snapshot.state)
    return generator


def sample(snapshot, count, noise, seed):
    """Draw count samples from a snapshot; deterministic in (snapshot, seed)."""
    if count < 1:
        raise ValueError(f"sample count must be >= 1, got {count}")
    if noise.dim != snapshot.noise_dim:
        raise ValueError(f"noise dim {noise.dim} does not match snapshot latent dim {snapshot.noise_dim}")
    generator = restore_generator(snapshot)
    z = noise.draw(np.random.default_rng(seed), count)
    return generator.predict(z)


def drift_at_epochs(snapshots, target, epochs, noise, count=500, seed=0):
    """
    Median-of-3 smoothed energy distance between snapshot samples and target.

    For each requested epoch e the distance is the median over epochs
    {e-1, e, e+1} that exist in the snapshot list.
    """
    by_epoch = {snap.epoch: snap for snap in snapshots}
    cache = {}

    def distance(epoch):
        if epoch not in cache:
            generated = sample(by_epoch[epoch], count, noise, seed)
            cache[epoch] = energy_distance(generated, target)
        return cache[epoch]

    result = {}
    for epoch in epochs:
        if epoch not in by_epoch:
            raise ValueError(f"no snapshot for epoch {epoch}")
        window = [e for e in (epoch - 1, epoch, epoch + 1) if e in by_epoch]
        result[epoch] = float(median_smooth([distance(e) for e in window])[window.index(epoch)])
    return result
