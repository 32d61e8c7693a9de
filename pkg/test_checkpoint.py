import json
import os

import numpy as np
import pytest

import detector
from checkpoint import (
    CheckpointError, RunManifest, file_sha256, load_checkpoint, load_detector, load_snapshot, save_checkpoint,
    save_detector, save_snapshot, snapshot_stem,
)
from gan import ModelSnapshot, build_generator, infer_arch
from synthesis import LabeledDataset

POINT_ARCH = {'kind': 'points', 'dim': 2, 'hidden': 8}


@pytest.fixture
def state(rng):
    return {'0.weight': rng.standard_normal((3, 4)).astype(np.float32),
            '0.bias': rng.standard_normal(4).astype(np.float32)}


@pytest.fixture
def snapshot(rng):
    generator = build_generator(POINT_ARCH, 2, rng)
    return ModelSnapshot(epoch=12, state=generator.state_dict(), loss=-0.25, arch=POINT_ARCH, noise_dim=2)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, state):
        stem = str(tmp_path / 'ckpt')
        save_checkpoint(stem, state, {'kind': 'test'})
        loaded, manifest = load_checkpoint(stem)
        assert list(loaded) == list(state)
        for name in state:
            np.testing.assert_array_equal(loaded[name], state[name])
        assert manifest['kind'] == 'test'
        assert manifest['tensors'][0] == {'name': '0.weight', 'shape': [3, 4]}

    def test_resave_is_byte_identical(self, tmp_path, state):
        first, second = str(tmp_path / 'a'), str(tmp_path / 'b')
        save_checkpoint(first, state)
        save_checkpoint(second, load_checkpoint(first)[0])
        assert (tmp_path / 'a.bin').read_bytes() == (tmp_path / 'b.bin').read_bytes()

    def test_blob_is_little_endian_float32(self, tmp_path, state):
        save_checkpoint(str(tmp_path / 'c'), state)
        assert len((tmp_path / 'c.bin').read_bytes()) == (12 + 4) * 4

    def test_truncated_blob(self, tmp_path, state):
        save_checkpoint(str(tmp_path / 'c'), state)
        blob = tmp_path / 'c.bin'
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match='manifest expects'):
            load_checkpoint(str(tmp_path / 'c'))

    def test_unknown_format_version(self, tmp_path, state):
        save_checkpoint(str(tmp_path / 'c'), state)
        manifest_path = tmp_path / 'c.json'
        manifest = json.loads(manifest_path.read_text())
        manifest['format_version'] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match='format version'):
            load_checkpoint(str(tmp_path / 'c'))

    def test_missing_files(self, tmp_path):
        with pytest.raises(CheckpointError, match='cannot read'):
            load_checkpoint(str(tmp_path / 'nothing'))


class TestSnapshots:
    def test_round_trip(self, tmp_path, snapshot):
        stem = snapshot_stem(str(tmp_path), snapshot.epoch)
        assert stem.endswith('gan_epoch_0012')
        save_snapshot(snapshot, stem, seed=5)
        loaded = load_snapshot(stem)
        assert loaded.epoch == 12 and loaded.loss == -0.25 and loaded.noise_dim == 2
        assert loaded.arch == POINT_ARCH
        for name, value in snapshot.state.items():
            np.testing.assert_array_equal(loaded.state[name], value)

    def test_detector_checkpoint_is_not_a_snapshot(self, tmp_path, rng):
        arch = infer_arch((2,), hidden=4)
        model = detector.DetectorModel(network=detector.build_detector(arch, rng), arch=arch)
        save_detector(model, str(tmp_path / 'detector'))
        with pytest.raises(CheckpointError, match='not a generator'):
            load_snapshot(str(tmp_path / 'detector'))


class TestDetectorCheckpoint:
    def test_round_trip_scores(self, tmp_path, rng):
        samples = np.concatenate([rng.normal(-0.5, 0.1, (20, 2)), rng.normal(0.5, 0.1, (20, 2))])
        data = LabeledDataset(samples=samples, labels=np.r_[np.zeros(20), np.ones(20)])
        model = detector.train(data, detector.DetectorConfig(epochs=3, batch_size=8), seed=1, hidden=8)
        save_detector(model, str(tmp_path / 'detector'))
        loaded = load_detector(str(tmp_path / 'detector'))
        assert loaded.loss_history == model.loss_history
        assert loaded.seed == model.seed and loaded.epochs == model.epochs
        np.testing.assert_array_equal(detector.score(loaded, samples), detector.score(model, samples))

    def test_generator_checkpoint_is_not_a_detector(self, tmp_path, snapshot):
        save_snapshot(snapshot, str(tmp_path / 'gen'))
        with pytest.raises(CheckpointError, match='not a detector'):
            load_detector(str(tmp_path / 'gen'))


class TestRunManifest:
    def test_provenance_counts(self, tmp_path):
        manifest = RunManifest(str(tmp_path))
        tags = ['normal:0', 'normal:1', 'generator:20:0', 'generator:20:1', 'generator:30:0', 'augmented:50:0']
        manifest.record_provenance('train_detector', tags, str(tmp_path / 'corpus_provenance.csv'))
        entry = manifest.data['provenance']['train_detector']
        assert entry['table'] == 'corpus_provenance.csv'
        assert entry['counts'] == {'augmented:50': 1, 'generator:20': 2, 'generator:30': 1, 'normal': 2}

    def test_warnings_are_deduplicated(self, tmp_path):
        manifest = RunManifest(str(tmp_path))
        manifest.add_warning('noise band empty')
        manifest.add_warning('noise band empty')
        assert manifest.data['warnings'] == ['noise band empty']

    def test_save_and_reload(self, tmp_path):
        source = tmp_path / 'config.json'
        source.write_text('{"seed": 1}')
        manifest = RunManifest(str(tmp_path / 'run'))
        manifest.record_config({'seed': 1}, 1)
        manifest.record_input(str(source))
        manifest.record_stage('select', [str(tmp_path / 'run' / 'regimes.csv')])
        manifest.save()

        reloaded = RunManifest.load_or_create(str(tmp_path / 'run'))
        assert reloaded.data['seed'] == 1
        assert reloaded.data['inputs'] == {os.path.abspath(str(source)): file_sha256(str(source))}
        assert reloaded.data['stages'] == {'select': ['regimes.csv']}

    def test_sha256_of_known_content(self, tmp_path):
        path = tmp_path / 'abc.txt'
        path.write_bytes(b'abc')
        assert file_sha256(str(path)) == 'ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad'
