import numpy as np
import pytest

import gan
from data import synth_ring
from nn_core import NonFiniteError, ShapeError

SMALL = gan.GanConfig(batch_size=32, epochs=2, critic_steps_per_gen=2)
NOISE = gan.NoiseSpec(dim=2)


@pytest.fixture(scope='module')
def ring():
    return synth_ring(256, radius=0.6, width=0.05, seed=3)


@pytest.fixture(scope='module')
def trained(ring):
    return gan.train(ring, SMALL, NOISE, seed=11)


class TestLosses:
    @pytest.mark.parametrize('real, fake, expected', [
        ([1, 1], [0, 0], 1.0),
        ([0.3, 0.7], [0.1, 0.1], 0.4),
        ([0.2, 0.2], [0.2, 0.2], 0.0),
    ])
    def test_generator_loss(self, real, fake, expected):
        assert gan.generator_loss(real, fake) == pytest.approx(expected)

    @pytest.mark.parametrize('real, fake, expected', [
        ([1, 1], [0, 0], -1.0),
        ([2], [5], 3.0),
        ([0.4], [0.4], 0.0),
    ])
    def test_critic_loss(self, real, fake, expected):
        assert gan.critic_loss(real, fake) == pytest.approx(expected)

    def test_empty_scores(self):
        with pytest.raises(ValueError):
            gan.generator_loss([], [1.0])
        with pytest.raises(ValueError):
            gan.critic_loss([1.0], [])


class TestArchitecture:
    def test_point_arch(self):
        assert gan.infer_arch((2,), hidden=32) == {'kind': 'points', 'dim': 2, 'hidden': 32}

    @pytest.mark.parametrize('size', [28, 30, 32])
    def test_image_generator_hits_sample_size(self, size):
        arch = gan.infer_arch((1, size, size), width=4)
        generator = gan.build_generator(arch, 8, np.random.default_rng(0))
        critic = gan.build_critic(arch, np.random.default_rng(0))
        images = generator.predict(np.zeros((2, 8), dtype=np.float32))
        assert images.shape == (2, 1, size, size)
        assert critic.predict(images).shape == (2, 1)

    def test_critic_has_no_sigmoid(self):
        critic = gan.build_critic(gan.infer_arch((1, 28, 28), width=4), np.random.default_rng(0))
        assert 'sigmoid' not in [layer.kind for layer in critic.layers]

    def test_rejects_non_square_images(self):
        with pytest.raises(ValueError):
            gan.infer_arch((1, 28, 30))


class TestTrain:
    def test_one_snapshot_per_epoch(self, trained):
        traj, snapshots = trained
        assert traj.epochs == [1, 2]
        assert [s.epoch for s in snapshots] == [1, 2]
        assert [s.loss for s in snapshots] == [r.loss_i for r in traj.records]

    def test_same_seed_is_bit_identical(self, ring, trained):
        traj, snapshots = gan.train(ring, SMALL, NOISE, seed=11)
        assert traj.same_losses(trained[0])
        for a, b in zip(snapshots, trained[1]):
            for key in a.state:
                assert np.array_equal(a.state[key], b.state[key])

    def test_snapshots_are_immutable(self, trained):
        snapshot = trained[1][0]
        with pytest.raises(ValueError):
            next(iter(snapshot.state.values()))[...] = 0.0

    def test_critic_weights_stay_clipped(self, ring):
        seen = []
        gan.train(ring, gan.GanConfig(batch_size=32, epochs=1, critic_steps_per_gen=1, clip_c=0.01), NOISE,
                  seed=0, on_epoch=lambda record, snapshot: seen.append(record))
        assert len(seen) == 1
        assert np.isfinite(seen[0].loss_c)
        # |critic loss| is bounded by a Lipschitz bound of the clipped network on [-1, 1] inputs
        assert abs(seen[0].loss_c) < 1.0

    def test_rejects_anomalies_in_training_data(self, ring):
        from synthesis import LabeledDataset
        data = LabeledDataset(samples=ring[:64], labels=np.r_[np.zeros(63), 1])
        with pytest.raises(ValueError, match='normal'):
            gan.train(data, SMALL, NOISE, seed=0)

    def test_batch_larger_than_data(self, ring):
        with pytest.raises(ValueError, match='batch_size'):
            gan.train(ring[:10], SMALL, NOISE, seed=0)

    def test_divergence_reports_epoch(self, ring, monkeypatch):
        monkeypatch.setattr(gan, 'generator_loss', lambda real, fake: float('nan'))
        with pytest.raises(gan.TrainingDivergedError) as info:
            gan.train(ring, SMALL, NOISE, seed=0)
        assert info.value.epoch == 1
        assert info.value.records == []

    def test_non_finite_activations_report_epoch(self, ring, monkeypatch):
        draw = gan.NoiseSpec.draw
        state = {'poisoned': False}

        def poisoned_draw(spec, rng, count, dtype=gan.TRAIN_DTYPE):
            z = draw(spec, rng, count, dtype)
            return np.full_like(z, np.inf) if state['poisoned'] else z

        monkeypatch.setattr(gan.NoiseSpec, 'draw', poisoned_draw)
        with pytest.raises(gan.TrainingDivergedError) as info:
            gan.train(ring, SMALL, NOISE, seed=0, on_epoch=lambda record, snapshot: state.update(poisoned=True))
        assert info.value.epoch == 2
        assert [r.epoch for r in info.value.records] == [1]
        assert isinstance(info.value.__cause__, NonFiniteError)


class TestSample:
    def test_shape_and_range(self, trained):
        batch = gan.sample(trained[1][-1], 5, NOISE, seed=1)
        assert batch.shape == (5, 2)
        assert np.all(np.abs(batch) <= 1.0)

    def test_deterministic(self, trained):
        snapshot = trained[1][0]
        assert np.array_equal(gan.sample(snapshot, 20, NOISE, 4), gan.sample(snapshot, 20, NOISE, 4))

    def test_distinct_seeds_differ(self, trained):
        snapshot = trained[1][0]
        assert not np.array_equal(gan.sample(snapshot, 20, NOISE, 4), gan.sample(snapshot, 20, NOISE, 5))

    def test_noise_dim_mismatch(self, trained):
        with pytest.raises(ValueError, match='noise dim'):
            gan.sample(trained[1][0], 3, gan.NoiseSpec(dim=3), 0)

    def test_count_must_be_positive(self, trained):
        with pytest.raises(ValueError):
            gan.sample(trained[1][0], 0, NOISE, 0)

    def test_restored_generator_rejects_wrong_latent(self, trained):
        generator = gan.restore_generator(trained[1][0])
        with pytest.raises(ShapeError):
            generator.predict(np.zeros((2, 5), dtype=np.float32))


def test_drift_at_epochs_uses_neighbours(trained, ring):
    _, snapshots = trained
    drift = gan.drift_at_epochs(snapshots, ring, [1, 2], NOISE, count=50, seed=0)
    assert set(drift) == {1, 2}
    assert drift[1] == drift[2]  # both windows are {1, 2}; median of two equal sets
    with pytest.raises(ValueError):
        gan.drift_at_epochs(snapshots, ring, [3], NOISE)


def test_drift_is_median_of_neighbouring_epochs(monkeypatch):
    distances = {1: 1.0, 2: 9.0, 3: 2.0, 4: 3.0}
    snapshots = [gan.ModelSnapshot(epoch=e, state={}, loss=0.0, arch={'kind': 'points', 'dim': 2, 'hidden': 4},
                                   noise_dim=2) for e in distances]
    monkeypatch.setattr(gan, 'sample', lambda snapshot, count, noise, seed: np.full((count, 2), snapshot.epoch))
    monkeypatch.setattr(gan, 'energy_distance', lambda generated, target: distances[int(generated[0, 0])])
    drift = gan.drift_at_epochs(snapshots, np.zeros((4, 2)), [1, 2, 3, 4], NOISE, count=4)
    assert drift == {1: 5.0, 2: 2.0, 3: 3.0, 4: 2.5}
