#!/usr/bin/env python3
"""
G2D pipeline command line

Stages consume the previous stage's files in the run directory, so any stage
can be rerun on its own:

    train_gan -> select -> synthesize -> train_detector -> evaluate

Usage:
    python cli.py --config configs/ring.json [--seed N] [--out DIR] [--stage NAME]
"""

import argparse
import csv
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

import data
import detector
import evaluation
import gan
import snapshots
import synthesis
from checkpoint import (
    RunManifest, load_detector, load_snapshot, save_detector, save_snapshot, snapshot_stem,
)
from g2d_config import (
    CONFIG_SCHEMA_VERSION, DATASET_DEFAULTS, DETECTOR_CONFIG, GAN_CONFIG, LOGGING_CONFIG, NOISE_CONFIG,
    SELECTION_CONFIG, SYNTHESIS_CONFIG, ConfigError, check_positive, merge_section,
)
from logging_config import log_error_with_context, log_performance, log_shutdown, log_startup, setup_logging

logger = logging.getLogger(__name__)

APP_NAME = "G2D Anomaly Detection Pipeline"
STAGES = ('train_gan', 'select', 'synthesize', 'train_detector', 'evaluate')
TOP_LEVEL_KEYS = {'schema_version', 'seed', 'out_dir', 'dataset', 'gan', 'noise', 'selection',
                  'synthesis', 'detector'}
DRIFT_SAMPLES = 500

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


@dataclass
class RunConfig:
    dataset: dict
    gan: gan.GanConfig
    noise: gan.NoiseSpec
    selection: dict
    thresholds: dict
    synthesis: synthesis.SynthesisConfig
    augment_count: int
    detector: detector.DetectorConfig
    gan_arch: dict
    detector_arch: dict
    seed: int
    out_dir: str
    source_path: str = None
    raw: dict = field(default_factory=dict)

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)


def _validate_dataset(section, errors, check_paths):
    if not isinstance(section, dict) or section.get('kind') not in DATASET_DEFAULTS:
        kind = section.get('kind') if isinstance(section, dict) else section
        errors.append(f"dataset.kind: must be one of {sorted(DATASET_DEFAULTS)}, got {kind!r}")
        return {}
    kind = section['kind']
    merged = merge_section('dataset', DATASET_DEFAULTS[kind],
                           {k: v for k, v in section.items() if k != 'kind'}, errors)
    merged['kind'] = kind
    if kind == 'ring':
        check_positive('dataset', merged, ('n', 'test_n'), errors, integer=True)
        check_positive('dataset', merged, ('width', 'outlier_width'), errors)
        if not 0 < merged['test_outlier_fraction'] < 1:
            errors.append(f"dataset.test_outlier_fraction: must be in (0, 1), got {merged['test_outlier_fraction']!r}")
    elif kind == 'mnist':
        for key in ('train_images', 'train_labels', 'test_images', 'test_labels'):
            path = merged[key]
            if not isinstance(path, str):
                errors.append(f"dataset.{key}: path required")
            elif check_paths and not os.path.exists(path):
                errors.append(f"dataset.{key}: file not found: {path}")
        classes = merged['target_classes']
        if not isinstance(classes, list) or not classes or not all(isinstance(c, int) and 0 <= c <= 9 for c in classes):
            errors.append(f"dataset.target_classes: expected a non-empty list of digits, got {classes!r}")
        fractions = merged['contamination']
        if not isinstance(fractions, list) or not fractions or not all(
                isinstance(f, (int, float)) and 0 < f < 1 for f in fractions):
            errors.append(f"dataset.contamination: expected fractions in (0, 1), got {fractions!r}")
        check_positive('dataset', merged, ('n_train', 'test_inliers', 'repeats'), errors, integer=True)
    else:
        check_positive('dataset', merged, ('frames', 'train_frames', 'height', 'width', 'patch_size'),
                       errors, integer=True)
        frames = merged['frames']
        if isinstance(frames, int) and not all(isinstance(f, int) and 0 <= f < frames
                                               for f in merged['anomaly_frames']):
            errors.append(f"dataset.anomaly_frames: must lie in [0, {frames})")
        patch, overlap = merged['patch_size'], merged['overlap']
        if isinstance(patch, int) and isinstance(overlap, int):
            if not 0 <= overlap < patch:
                errors.append(f"dataset.overlap: must be in [0, {patch}), got {overlap}")
            if isinstance(merged['height'], int) and isinstance(merged['width'], int) and \
                    min(merged['height'], merged['width']) < patch:
                errors.append("dataset.patch_size: larger than the frame")
    return merged


def load_run_config(path, seed=None, out_dir=None, check_paths=True):
    """Read, merge and validate a JSON run config; raises ConfigError listing every problem."""
    errors = []
    try:
        with open(path, encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError([f"config: cannot read {path}: {e}"]) from e
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be an object"])

    for key in sorted(set(raw) - TOP_LEVEL_KEYS):
        errors.append(f"{key}: unknown key")
    if raw.get('schema_version') != CONFIG_SCHEMA_VERSION:
        errors.append(f"schema_version: expected {CONFIG_SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    seed = seed if seed is not None else raw.get('seed')
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors.append(f"seed: a non-negative integer is required, got {seed!r}")
    stem = os.path.splitext(os.path.basename(path))[0]
    out_dir = out_dir or raw.get('out_dir') or os.path.join('runs', stem)

    dataset = _validate_dataset(raw.get('dataset'), errors, check_paths)
    gan_section = merge_section('gan', GAN_CONFIG, raw.get('gan'), errors)
    check_positive('gan', gan_section, ('lr', 'beta1', 'beta2', 'clip_c'), errors)
    check_positive('gan', gan_section, ('batch_size', 'epochs', 'critic_steps_per_gen', 'width', 'hidden'),
                   errors, integer=True)
    noise_section = merge_section('noise', NOISE_CONFIG, raw.get('noise'), errors)
    check_positive('noise', noise_section, ('dim',), errors, integer=True)
    check_positive('noise', noise_section, ('std',), errors)
    selection = merge_section('selection', SELECTION_CONFIG, raw.get('selection'), errors)
    check_positive('selection', selection, ('h', 'smoothing_window', 'k'), errors, integer=True)
    if not 0 <= selection['include_noise_fraction'] <= 0.5:
        errors.append(f"selection.include_noise_fraction: must be in [0, 0.5], got "
                      f"{selection['include_noise_fraction']!r}")
    for key in ('eps1', 'eps2', 'eps3'):
        if selection[key] is not None:
            check_positive('selection', selection, (key,), errors)
    synth_section = merge_section('synthesis', SYNTHESIS_CONFIG, raw.get('synthesis'), errors)
    if synth_section['m'] is not None:
        check_positive('synthesis', synth_section, ('m',), errors, integer=True)
    check_positive('synthesis', synth_section, ('target_balance',), errors)
    if not isinstance(synth_section['augment_count'], int) or synth_section['augment_count'] < 0:
        errors.append(f"synthesis.augment_count: must be a non-negative integer, got {synth_section['augment_count']!r}")
    det_section = merge_section('detector', DETECTOR_CONFIG, raw.get('detector'), errors)
    check_positive('detector', det_section, ('lr',), errors)
    check_positive('detector', det_section, ('batch_size', 'epochs', 'width', 'hidden'), errors, integer=True)

    if errors:
        raise ConfigError(errors)

    try:
        config = RunConfig(
            dataset=dataset,
            gan=gan.GanConfig(**{k: gan_section[k] for k in (
                'lr', 'beta1', 'beta2', 'batch_size', 'epochs', 'critic_steps_per_gen', 'clip_c')}),
            noise=gan.NoiseSpec(**noise_section),
            selection={k: selection[k] for k in ('h', 'smoothing_window', 'k', 'include_noise_fraction')},
            thresholds={k: selection[k] for k in ('eps1', 'eps2', 'eps3') if selection[k] is not None},
            synthesis=synthesis.SynthesisConfig(m=synth_section['m'], k=selection['k'],
                                                seed=stage_seed(seed, 'synthesis'),
                                                target_balance=synth_section['target_balance']),
            augment_count=synth_section['augment_count'],
            detector=detector.DetectorConfig(**{k: det_section[k] for k in (
                'lr', 'momentum', 'batch_size', 'epochs', 'alpha')}),
            gan_arch={'width': gan_section['width'], 'hidden': gan_section['hidden']},
            detector_arch={'width': det_section['width'], 'hidden': det_section['hidden']},
            seed=seed,
            out_dir=out_dir,
            source_path=path,
        )
    except ValueError as e:
        raise ConfigError([str(e)]) from e
    config.raw = {'schema_version': CONFIG_SCHEMA_VERSION, 'seed': seed, 'dataset': dataset,
                  'gan': gan_section, 'noise': noise_section, 'selection': selection,
                  'synthesis': synth_section, 'detector': det_section}
    return config


def stage_seed(seed, name):
    """Independent, stable integer seed per pipeline stage."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _manifest(cfg):
    manifest = RunManifest.load_or_create(cfg.out_dir)
    manifest.record_config(cfg.raw, cfg.seed)
    if cfg.source_path:
        manifest.record_input(cfg.source_path)
    if cfg.dataset['kind'] == 'mnist':
        for key in ('train_images', 'train_labels', 'test_images', 'test_labels'):
            manifest.record_input(cfg.dataset[key])
    return manifest


def load_training_normals(cfg):
    """Normal-only training set for the configured dataset, in [-1, 1]."""
    ds = cfg.dataset
    seed = stage_seed(cfg.seed, 'normals')
    if ds['kind'] == 'ring':
        return synthesis.LabeledDataset.normals(data.synth_ring(ds['n'], ds['radius'], ds['width'], seed))
    if ds['kind'] == 'mnist':
        images, labels = data.load_idx(ds['train_images']), data.load_idx(ds['train_labels'])
        inliers, _ = data.class_pools(images, labels, ds['target_classes'])
        if len(inliers) < ds['n_train']:
            raise data.DataError(f"only {len(inliers)} training images of classes {ds['target_classes']}")
        picked = np.sort(np.random.default_rng(seed).choice(len(inliers), ds['n_train'], replace=False))
        return synthesis.LabeledDataset.normals(inliers[picked])
    frames, labels = data.synth_video(ds['train_frames'], (), seed, ds['height'], ds['width'],
                                      scene_seed=stage_seed(cfg.seed, 'scene'))
    patches = data.video_patches(frames, labels, ds['patch_size'], ds['overlap'])
    return synthesis.LabeledDataset.normals(patches.samples)


def evaluation_sets(cfg):
    """[(fraction, repeat, LabeledDataset)] for ring/mnist, [(None, 0, patch dataset)] for video."""
    ds = cfg.dataset
    if ds['kind'] == 'ring':
        inliers = data.synth_ring(ds['test_n'], ds['radius'], ds['width'], stage_seed(cfg.seed, 'test_inliers'))
        pool = data.synth_ring(ds['test_n'] * 4, ds['outlier_radius'], ds['outlier_width'],
                               stage_seed(cfg.seed, 'test_pool'))
        spec = data.ContaminationSpec((0,), ds['test_outlier_fraction'], stage_seed(cfg.seed, 'contaminate'),
                                      allow_out_of_range=True)
        return [(ds['test_outlier_fraction'], 0, data.contaminate(inliers, pool, spec))]
    if ds['kind'] == 'mnist':
        images, labels = data.load_idx(ds['test_images']), data.load_idx(ds['test_labels'])
        inliers, pool = data.class_pools(images, labels, ds['target_classes'])
        sets = []
        for repeat in range(ds['repeats']):
            rng = np.random.default_rng(stage_seed(cfg.seed + repeat, 'test_inliers'))
            chosen = inliers[np.sort(rng.choice(len(inliers), min(ds['test_inliers'], len(inliers)), replace=False))]
            for fraction in ds['contamination']:
                spec = data.ContaminationSpec(tuple(ds['target_classes']), fraction,
                                              stage_seed(cfg.seed + repeat, f"contaminate:{fraction}"),
                                              allow_out_of_range=True)
                sets.append((fraction, repeat, data.contaminate(chosen, pool, spec)))
        return sets
    frames, labels = data.synth_video(ds['frames'], ds['anomaly_frames'], stage_seed(cfg.seed, 'test_video'),
                                      ds['height'], ds['width'], scene_seed=stage_seed(cfg.seed, 'scene'))
    data.save_video(frames, labels, cfg.path('video'))
    return [(None, 0, data.video_patches(frames, labels, ds['patch_size'], ds['overlap']))]


def cmd_train_gan(cfg):
    manifest = _manifest(cfg)
    normals = load_training_normals(cfg)
    arch = gan.infer_arch(normals.sample_shape, **cfg.gan_arch)
    checkpoint_dir = cfg.path('checkpoints')
    artifacts = []

    def persist(record, snapshot):
        artifacts.extend(save_snapshot(snapshot, snapshot_stem(checkpoint_dir, snapshot.epoch), cfg.seed))

    traj, _ = gan.train(normals, cfg.gan, cfg.noise, stage_seed(cfg.seed, 'gan'), arch=arch, on_epoch=persist)
    traj.smoothing_window = cfg.selection['smoothing_window']
    snapshots.write_trajectory_csv(traj, cfg.path('trajectory.csv'))
    artifacts.append(cfg.path('trajectory.csv'))
    manifest.record_stage('train_gan', artifacts)
    manifest.save()
    return artifacts


def _load_snapshots(cfg, epochs):
    return [load_snapshot(snapshot_stem(cfg.path('checkpoints'), epoch)) for epoch in epochs]


def _thresholds(cfg, traj):
    overrides = cfg.thresholds
    if len(overrides) == 3:
        return snapshots.SelectionThresholds(**overrides)
    derived = snapshots.default_thresholds(traj, cfg.selection['h'])
    values = {'eps1': derived.eps1, 'eps2': derived.eps2, 'eps3': derived.eps3}
    values.update(overrides)
    return snapshots.SelectionThresholds(**values)


def cmd_select(cfg):
    manifest = _manifest(cfg)
    h = cfg.selection['h']
    traj = snapshots.read_trajectory_csv(cfg.path('trajectory.csv'), cfg.selection['smoothing_window'])
    thr = _thresholds(cfg, traj)
    rows = snapshots.regime_table(traj, thr, h)
    snapshots.write_regime_table(rows, cfg.path('regimes.csv'))
    selected = snapshots.select_generators(traj, _load_snapshots(cfg, traj.epochs), thr,
                                           cfg.selection['k'], cfg.selection['include_noise_fraction'], h)
    inliers = [epoch for epoch, _, _, regime in rows if regime is snapshots.Regime.INLIER]
    augment_epoch = inliers[-1] if inliers else traj.epochs[-1]
    if not inliers:
        message = f"no Inlier epochs; augmentation would use the final epoch {augment_epoch}"
        logger.warning(f"⚠️ {message}")
        manifest.add_warning(message)
    augment_regime = next((r for e, _, _, r in rows if e == augment_epoch), None)
    selection = {
        'epochs': [s.epoch for s in selected],
        'thresholds': {'eps1': thr.eps1, 'eps2': thr.eps2, 'eps3': thr.eps3},
        'h': h,
        'augment_epoch': augment_epoch,
        'augment_regime': augment_regime.value if augment_regime else None,
    }
    with open(cfg.path('selected.json'), 'w', encoding='utf-8') as f:
        json.dump(selection, f, indent=2, sort_keys=True)
        f.write('\n')
    artifacts = [cfg.path('regimes.csv'), cfg.path('selected.json')]
    manifest.record_stage('select', artifacts)
    manifest.save()
    return artifacts


def _read_selection(cfg):
    with open(cfg.path('selected.json'), encoding='utf-8') as f:
        return json.load(f)


def _save_dataset(dataset, path):
    np.savez(path, samples=dataset.samples, labels=dataset.labels,
             provenance=np.asarray(dataset.provenance, dtype=str))
    return path


def _load_dataset(path):
    with np.load(path) as archive:
        return synthesis.LabeledDataset(samples=archive['samples'], labels=archive['labels'],
                                        provenance=[str(p) for p in archive['provenance']])


def cmd_synthesize(cfg):
    manifest = _manifest(cfg)
    selection = _read_selection(cfg)
    selected = _load_snapshots(cfg, selection['epochs'])
    normals = load_training_normals(cfg)
    outliers = synthesis.generate_outliers(selected, cfg.synthesis, cfg.noise, n_normals=len(normals))
    artifacts = [_save_dataset(outliers, cfg.path('pseudo_anomalies.npz')),
                 synthesis.save_sample_grid(outliers.samples, cfg.path('pseudo_anomalies.png'))]
    if cfg.augment_count:
        converged = _load_snapshots(cfg, [selection['augment_epoch']])[0]
        augmented = synthesis.augment_normals(converged, cfg.augment_count, cfg.noise,
                                              stage_seed(cfg.seed, 'augment'),
                                              regime=selection['augment_regime'], manifest=manifest)
        artifacts.append(_save_dataset(augmented, cfg.path('augmented_normals.npz')))
    manifest.record_stage('synthesize', artifacts)
    manifest.save()
    return artifacts


def _merge_normals(first, second):
    return synthesis.LabeledDataset(
        samples=np.concatenate([first.samples, second.samples.astype(first.samples.dtype)]),
        labels=np.concatenate([first.labels, second.labels]),
        provenance=first.provenance + second.provenance)


def cmd_train_detector(cfg):
    manifest = _manifest(cfg)
    normals = load_training_normals(cfg)
    if cfg.augment_count and os.path.exists(cfg.path('augmented_normals.npz')):
        normals = _merge_normals(normals, _load_dataset(cfg.path('augmented_normals.npz')))
    outliers = _load_dataset(cfg.path('pseudo_anomalies.npz'))
    corpus = synthesis.assemble(normals, outliers, stage_seed(cfg.seed, 'assemble'))

    provenance_path = cfg.path('corpus_provenance.csv')
    with open(provenance_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['index', 'label', 'provenance'])
        writer.writerows((i, int(label), tag) for i, (label, tag) in enumerate(zip(corpus.labels, corpus.provenance)))
    manifest.record_provenance('train_detector', corpus.provenance, provenance_path)

    arch = gan.infer_arch(corpus.sample_shape, **cfg.detector_arch)
    model = detector.train(corpus, cfg.detector, stage_seed(cfg.seed, 'detector'), arch=arch)
    artifacts = list(save_detector(model, cfg.path('checkpoints', 'detector')))
    loss_path = cfg.path('detector_loss.csv')
    with open(loss_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['epoch', 'bce'])
        writer.writerows((i + 1, repr(loss)) for i, loss in enumerate(model.loss_history))
    artifacts += [provenance_path, loss_path]
    manifest.record_stage('train_detector', artifacts)
    manifest.save()
    return artifacts


def _drift(cfg, normals, selection, noise):
    traj = snapshots.read_trajectory_csv(cfg.path('trajectory.csv'))
    epochs = sorted({traj.epochs[0], traj.epochs[-1], *selection['epochs']})
    rng = np.random.default_rng(stage_seed(cfg.seed, 'drift'))
    target = normals.samples[np.sort(rng.choice(len(normals), min(DRIFT_SAMPLES, len(normals)), replace=False))]
    drift = {}
    for snapshot in _load_snapshots(cfg, epochs):
        generated = gan.sample(snapshot, DRIFT_SAMPLES, noise, stage_seed(cfg.seed, 'drift_sample'))
        drift[f"epoch_{snapshot.epoch:04d}"] = evaluation.energy_distance(generated, target)
    return drift, target


def cmd_evaluate(cfg):
    manifest = _manifest(cfg)
    model = load_detector(cfg.path('checkpoints', 'detector'))
    tau = 1.0 - cfg.detector.alpha
    sets = evaluation_sets(cfg)

    frame_level = None
    curve = []
    if cfg.dataset['kind'] == 'video':
        patches = sets[0][2]
        headline = evaluation.ScoredSet(detector.anomaly_scores(model, patches.samples), patches.labels,
                                        patches.frame_index)
        frame_level = evaluation.frame_scores(headline)
    else:
        by_fraction, first_repeat = {}, {}
        for fraction, repeat, test_set in sets:
            scored = evaluation.ScoredSet(detector.anomaly_scores(model, test_set.samples), test_set.labels)
            by_fraction.setdefault(fraction, []).append(evaluation.f1(scored, tau))
            if repeat == 0:
                first_repeat[fraction] = scored
        # headline metrics come from the most contaminated test set
        headline = first_repeat[max(first_repeat)]
        curve = [(fraction, float(np.mean(values))) for fraction, values in sorted(by_fraction.items())]

    normals = load_training_normals(cfg)
    selection = _read_selection(cfg)
    drift, target = _drift(cfg, normals, selection, cfg.noise)
    outliers = _load_dataset(cfg.path('pseudo_anomalies.npz'))
    rng = np.random.default_rng(stage_seed(cfg.seed, 'projection'))
    subset = outliers.samples[np.sort(rng.choice(len(outliers), min(DRIFT_SAMPLES, len(outliers)), replace=False))]
    drift['pseudo_anomalies'] = evaluation.energy_distance(subset, target)
    projected = evaluation.pca_project(np.concatenate([target.reshape(len(target), -1),
                                                       subset.reshape(len(subset), -1)]))
    projection = {'normal': projected[:len(target)], 'pseudo-anomaly': projected[len(target):]}

    report = evaluation.build_report(headline, tau, drift=drift, f1_vs_contamination=curve,
                                     frame_level=frame_level, projection=projection)
    paths = evaluation.emit_report(report, cfg.path('report'))
    manifest.record_stage('evaluate', list(paths.values()))
    manifest.save()
    return list(paths.values())


COMMANDS = {
    'train_gan': cmd_train_gan,
    'select': cmd_select,
    'synthesize': cmd_synthesize,
    'train_detector': cmd_train_detector,
    'evaluate': cmd_evaluate,
}


def cmd_run_all(cfg):
    artifacts = []
    for stage in STAGES:
        started = datetime.now()
        logger.info(f"▶️ Stage {stage}")
        artifacts += COMMANDS[stage](cfg)
        log_performance(logger, stage, started)
    return artifacts


def cmd_fetch_mnist(cfg):
    return list(data.fetch_mnist(os.path.dirname(cfg.dataset['train_images']) or '.').values())


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=APP_NAME)
    parser.add_argument('--config', required=True, help='JSON run config')
    parser.add_argument('--seed', type=int, default=None, help='overrides the config seed')
    parser.add_argument('--out', default=None, help='run output directory')
    parser.add_argument('--stage', default='all', choices=('all', 'fetch_mnist') + STAGES)
    parser.add_argument('--log-level', default=LOGGING_CONFIG['level'])
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    setup_logging(log_level=args.log_level, log_file=LOGGING_CONFIG['file'])
    log_startup(logger, APP_NAME)
    try:
        cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out,
                              check_paths=args.stage != 'fetch_mnist')
        os.makedirs(cfg.out_dir, exist_ok=True)
        logger.info(f"📋 Config {args.config}: seed={cfg.seed}, dataset={cfg.dataset['kind']}, out={cfg.out_dir}")
        if args.stage == 'all':
            artifacts = cmd_run_all(cfg)
        elif args.stage == 'fetch_mnist':
            artifacts = cmd_fetch_mnist(cfg)
        else:
            artifacts = COMMANDS[args.stage](cfg)
        logger.info(f"✅ {len(artifacts)} artifacts written under {cfg.out_dir}")
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"❌ {e}")
        return EXIT_INVALID
    except Exception as e:
        log_error_with_context(logger, e, f"stage {args.stage}, config {args.config}")
        return EXIT_RUNTIME
    finally:
        log_shutdown(logger, APP_NAME)


if __name__ == '__main__':
    sys.exit(main())
