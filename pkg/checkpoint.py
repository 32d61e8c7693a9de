"""
Checkpoint persistence and run manifests

A checkpoint is a JSON manifest (<stem>.json) plus a weight blob (<stem>.bin)
holding little-endian float32 tensors concatenated in manifest order.
"""

import hashlib
import json
import logging
import os

import numpy as np

from detector import DetectorModel, build_detector
from gan import ModelSnapshot

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MODULE_VERSIONS = {'nn_core': 1, 'gan': 1, 'detector': 1, 'checkpoint': CHECKPOINT_FORMAT_VERSION}
BLOB_DTYPE = np.dtype('<f4')


class CheckpointError(ValueError):
    """Checkpoint files are missing, inconsistent or truncated."""


def _dump_json(obj, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write('\n')


def save_checkpoint(stem, state, meta=None):
    """Write <stem>.json and <stem>.bin; returns both paths."""
    tensors = [{'name': name, 'shape': list(np.shape(value))} for name, value in state.items()]
    manifest = {'format_version': CHECKPOINT_FORMAT_VERSION, 'module_versions': MODULE_VERSIONS,
                'tensors': tensors}
    manifest.update(meta or {})
    blob = b''.join(np.ascontiguousarray(value, dtype=BLOB_DTYPE).tobytes() for value in state.values())
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    _dump_json(manifest, f"{stem}.json")
    with open(f"{stem}.bin", 'wb') as f:
        f.write(blob)
    return f"{stem}.json", f"{stem}.bin"


def load_checkpoint(stem):
    """Read a checkpoint back into (ordered state dict of float32 arrays, manifest)."""
    try:
        with open(f"{stem}.json", encoding='utf-8') as f:
            manifest = json.load(f)
        with open(f"{stem}.bin", 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {stem}: {e}") from e
    if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{stem}: unsupported format version {manifest.get('format_version')}")
    sizes = [int(np.prod(t['shape'])) for t in manifest['tensors']]
    expected = sum(sizes) * BLOB_DTYPE.itemsize
    if len(blob) != expected:
        raise CheckpointError(f"{stem}.bin has {len(blob)} bytes, manifest expects {expected}")
    flat = np.frombuffer(blob, dtype=BLOB_DTYPE)
    state, offset = {}, 0
    for tensor, size in zip(manifest['tensors'], sizes):
        state[tensor['name']] = flat[offset:offset + size].reshape(tensor['shape']).astype(np.float32)
        offset += size
    return state, manifest


def save_snapshot(snapshot, stem, seed=None):
    return save_checkpoint(stem, snapshot.state, {
        'kind': 'generator', 'epoch': snapshot.epoch, 'loss': snapshot.loss,
        'arch': snapshot.arch, 'noise_dim': snapshot.noise_dim, 'seed': seed,
    })


def load_snapshot(stem):
    state, manifest = load_checkpoint(stem)
    if manifest.get('kind') != 'generator':
        raise CheckpointError(f"{stem} is not a generator checkpoint")
    return ModelSnapshot(epoch=manifest['epoch'], state=state, loss=manifest['loss'],
                         arch=manifest['arch'], noise_dim=manifest['noise_dim'])


def snapshot_stem(directory, epoch):
    return os.path.join(directory, f"gan_epoch_{epoch:04d}")


def save_detector(model, stem):
    return save_checkpoint(stem, model.network.state_dict(), {
        'kind': 'detector', 'arch': model.arch, 'seed': model.seed, 'epochs': model.epochs,
        'loss': model.final_loss, 'loss_history': model.loss_history,
    })


def load_detector(stem):
    state, manifest = load_checkpoint(stem)
    if manifest.get('kind') != 'detector':
        raise CheckpointError(f"{stem} is not a detector checkpoint")
    network = build_detector(manifest['arch'], np.random.default_rng(0))
    network.load_state_dict(state)
    return DetectorModel(network=network, arch=manifest['arch'], seed=manifest['seed'],
                         epochs=manifest['epochs'], final_loss=manifest['loss'],
                         loss_history=list(manifest.get('loss_history', [])))


def file_sha256(path, chunk_size=1 << 20):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    """run_manifest.json: config, seed, input hashes, stage artifacts, warnings, provenance counts."""

    FILENAME = 'run_manifest.json'

    def __init__(self, out_dir, data=None):
        self.out_dir = out_dir
        self.data = data or {'config': None, 'seed': None, 'inputs': {}, 'stages': {},
                             'warnings': [], 'provenance': {}}

    @property
    def path(self):
        return os.path.join(self.out_dir, self.FILENAME)

    @classmethod
    def load_or_create(cls, out_dir):
        path = os.path.join(out_dir, cls.FILENAME)
        if os.path.exists(path):
            with open(path, encoding='utf-8') as f:
                return cls(out_dir, json.load(f))
        return cls(out_dir)

    def record_config(self, config_dict, seed):
        self.data['config'] = config_dict
        self.data['seed'] = seed

    def record_input(self, path):
        self.data['inputs'][os.path.abspath(path)] = file_sha256(path)

    def record_stage(self, stage, artifacts):
        self.data['stages'][stage] = sorted(os.path.relpath(a, self.out_dir) for a in artifacts)

    def record_provenance(self, stage, provenance, table_path):
        """Per-sample provenance goes to table_path; the manifest keeps counts per source."""
        counts = {}
        for tag in provenance:
            parts = tag.split(':')
            source = ':'.join(parts[:2]) if parts[0] in ('generator', 'augmented') else parts[0]
            counts[source] = counts.get(source, 0) + 1
        self.data['provenance'][stage] = {
            'table': os.path.relpath(table_path, self.out_dir),
            'counts': dict(sorted(counts.items())),
        }

    def add_warning(self, message):
        if message not in self.data['warnings']:
            self.data['warnings'].append(message)

    def save(self):
        os.makedirs(self.out_dir, exist_ok=True)
        _dump_json(self.data, self.path)
        return self.path
