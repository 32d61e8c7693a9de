"""
G2D Configuration
Default settings, environment overrides and run-config schema validation
"""

import os

CONFIG_SCHEMA_VERSION = 1

# Generator / critic training
GAN_CONFIG = {
    'lr': 0.0001,
    'beta1': 0.5,
    'beta2': 0.999,
    'batch_size': 64,
    'epochs': 25,
    'critic_steps_per_gen': 5,
    'clip_c': 0.01,
    'width': 16,   # image archs: base channel count
    'hidden': 64,  # point archs: hidden units
}

NOISE_CONFIG = {
    'dim': 64,
    'mean': 0.0,
    'std': 1.0,
}

# Snapshot selection; eps1/eps2/eps3 of None means "derive from the trajectory"
SELECTION_CONFIG = {
    'h': 5,
    'smoothing_window': 3,
    'k': 4,
    'include_noise_fraction': 0.25,
    'eps1': None,
    'eps2': None,
    'eps3': None,
}

# Pseudo-anomaly synthesis; m of None means ceil(balance * |T| / k)
SYNTHESIS_CONFIG = {
    'm': None,
    'target_balance': 1.0,
    'augment_count': 0,
}

DETECTOR_CONFIG = {
    'lr': 0.01,
    'momentum': 0.9,
    'batch_size': 32,
    'epochs': 20,
    'alpha': 0.5,
    'width': 16,
    'hidden': 64,
}

DATASET_DEFAULTS = {
    'ring': {
        'n': 2000,
        'radius': 0.6,
        'width': 0.05,
        'outlier_radius': 0.0,
        'outlier_width': 0.15,
        'test_n': 500,
        'test_outlier_fraction': 0.3,
    },
    'mnist': {
        'train_images': None,
        'train_labels': None,
        'test_images': None,
        'test_labels': None,
        'target_classes': [8],
        'n_train': 2000,
        'contamination': [0.1, 0.2, 0.3, 0.4, 0.5],
        'test_inliers': 500,
        'repeats': 1,
    },
    'video': {
        'frames': 200,
        'anomaly_frames': [],
        'train_frames': 100,
        'height': 60,
        'width': 90,
        'patch_size': 30,
        'overlap': 5,
    },
}

# Logging Configuration
LOGGING_CONFIG = {
    'level': os.environ.get('LOG_LEVEL', 'INFO'),
    'file': os.environ.get('LOG_FILE', 'g2d.log'),
}

RUNTIME_CONFIG = {
    'threads': os.environ.get('G2D_THREADS', ''),
}

# MNIST download (data.fetch_mnist)
MNIST_CONFIG = {
    'mirror': os.environ.get('MNIST_MIRROR', 'https://storage.googleapis.com/cvdf-datasets/mnist/'),
    'files': {
        'train_images': 'train-images-idx3-ubyte.gz',
        'train_labels': 'train-labels-idx1-ubyte.gz',
        'test_images': 't10k-images-idx3-ubyte.gz',
        'test_labels': 't10k-labels-idx1-ubyte.gz',
    },
    'timeout': 30,  # seconds
    'retry_attempts': 3,
}

# Scoring service (app.py)
SERVICE_CONFIG = {
    'run_dir': os.environ.get('G2D_RUN_DIR', 'runs/latest'),
    'port': int(os.environ.get('PORT', 5000)),
    'max_samples_per_request': 4096,
}


class ConfigError(ValueError):
    """Run config failed validation; .errors lists every offending field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid run config:\n" + "\n".join(f"  - {e}" for e in self.errors))


def get_thread_count():
    """Internal parallelism cap from G2D_THREADS (defaults to 1)."""
    raw = os.environ.get('G2D_THREADS', RUNTIME_CONFIG['threads'])
    try:
        return max(1, int(raw))
    except (TypeError, ValueError):
        return 1


def get_run_dir():
    return os.environ.get('G2D_RUN_DIR', SERVICE_CONFIG['run_dir'])


def merge_section(name, defaults, overrides, errors):
    """Defaults updated with overrides; unknown keys are reported, not merged."""
    if overrides is None:
        return dict(defaults)
    if not isinstance(overrides, dict):
        errors.append(f"{name}: expected an object, got {type(overrides).__name__}")
        return dict(defaults)
    merged = dict(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            errors.append(f"{name}.{key}: unknown key")
        else:
            merged[key] = value
    return merged


def check_positive(section, values, keys, errors, integer=False):
    for key in keys:
        value = values.get(key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{section}.{key}: expected a number, got {value!r}")
        elif integer and not isinstance(value, int):
            errors.append(f"{section}.{key}: expected an integer, got {value!r}")
        elif value <= 0:
            errors.append(f"{section}.{key}: must be positive, got {value!r}")
