"""
Dataset ingestion and experiment protocols

IDX image/label files, contamination of evaluation sets, sliding-window patch
extraction for video frames, and synthetic benchmarks (2D ring, textured video).
All image data is grayscale and rescaled to [-1, 1].
"""

import gzip
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from g2d_config import MNIST_CONFIG
from synthesis import LabeledDataset

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CONTAMINATION_RANGE = (0.1, 0.5)


class IdxFormatError(ValueError):
    """IDX file has a bad magic number or is truncated."""


class DataError(ValueError):
    """A data protocol cannot be satisfied with the given inputs."""


def _open(path):
    return gzip.open(path, 'rb') if str(path).endswith('.gz') else open(path, 'rb')


def load_idx(path):
    """
    Parse a big-endian IDX file.

    Images (magic 0x00000803) come back as float32 (N, 1, rows, cols) in
    [-1, 1]; labels (magic 0x00000801) as uint8 (N,).
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path) as f:
        payload = f.read()
    if len(payload) < 8:
        raise IdxFormatError(f"{path}: truncated header ({len(payload)} bytes)")
    magic, count = struct.unpack('>II', payload[:8])
    if magic == IDX_IMAGES_MAGIC:
        if len(payload) < 16:
            raise IdxFormatError(f"{path}: truncated image header")
        rows, cols = struct.unpack('>II', payload[8:16])
        expected = count * rows * cols
        body = payload[16:]
        if len(body) != expected:
            raise IdxFormatError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
        pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, 1, rows, cols)
        logger.info(f"📥 Loaded {count} images of {rows}x{cols} from {path}")
        return (pixels.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
    if magic == IDX_LABELS_MAGIC:
        body = payload[8:]
        if len(body) != count:
            raise IdxFormatError(f"{path}: expected {count} label bytes, found {len(body)}")
        logger.info(f"📥 Loaded {count} labels from {path}")
        return np.frombuffer(body, dtype=np.uint8).copy()
    raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x}")


def fetch_mnist(dest_dir, mirror=None, timeout=None, retry_attempts=None):
    """Download the four MNIST IDX files into dest_dir; existing files are kept."""
    mirror = mirror or MNIST_CONFIG['mirror']
    timeout = timeout or MNIST_CONFIG['timeout']
    retry_attempts = retry_attempts or MNIST_CONFIG['retry_attempts']
    os.makedirs(dest_dir, exist_ok=True)
    paths = {}
    for key, name in MNIST_CONFIG['files'].items():
        path = os.path.join(dest_dir, name)
        paths[key] = path
        if os.path.exists(path):
            logger.debug(f"📁 {path} already present")
            continue
        url = f"{mirror.rstrip('/')}/{name}"
        for attempt in range(1, retry_attempts + 1):
            try:
                response = requests.get(url, timeout=timeout)
                response.raise_for_status()
                with open(path, 'wb') as f:
                    f.write(response.content)
                logger.info(f"✅ Downloaded {url} ({len(response.content)} bytes)")
                break
            except requests.exceptions.RequestException as e:
                logger.warning(f"⚠️ Download attempt {attempt}/{retry_attempts} for {url} failed: {e}")
                if attempt == retry_attempts:
                    raise DataError(f"cannot download {url}: {e}") from e
                time.sleep(attempt)
    return paths


@dataclass(frozen=True)
class ContaminationSpec:
    target_class: tuple
    outlier_fraction: float
    seed: int = 0
    allow_out_of_range: bool = False

    def __post_init__(self):
        lo, hi = CONTAMINATION_RANGE
        if not self.allow_out_of_range and not lo <= self.outlier_fraction <= hi:
            raise ValueError(f"outlier_fraction {self.outlier_fraction} outside [{lo}, {hi}]; "
                             f"set allow_out_of_range to override")
        if not 0 < self.outlier_fraction < 1:
            raise ValueError(f"outlier_fraction must be in (0, 1), got {self.outlier_fraction}")


def class_pools(images, labels, target_classes):
    """Split a labeled image set into (inliers, outlier pool) by target classes."""
    mask = np.isin(labels, list(np.atleast_1d(target_classes)))
    return images[mask], images[~mask]


def contaminate(inliers, outlier_pool, spec):
    """
    All inliers plus round(f * n_in / (1 - f)) outliers drawn without
    replacement, so outliers make up round(fraction * N) of the N samples.
    """
    n_in = len(inliers)
    n_out = int(np.floor(spec.outlier_fraction * n_in / (1 - spec.outlier_fraction) + 0.5))
    if n_out > len(outlier_pool):
        raise DataError(f"outlier pool has {len(outlier_pool)} samples, need {n_out}")
    rng = np.random.default_rng(spec.seed)
    picked = rng.choice(len(outlier_pool), size=n_out, replace=False)
    samples = np.concatenate([np.asarray(inliers), np.asarray(outlier_pool)[picked]], axis=0)
    labels = np.concatenate([np.zeros(n_in, dtype=np.int64), np.ones(n_out, dtype=np.int64)])
    provenance = [f"inlier:{i}" for i in range(n_in)] + [f"outlier:{int(i)}" for i in picked]
    order = rng.permutation(labels.size)
    return LabeledDataset(samples=samples[order], labels=labels[order],
                          provenance=[provenance[i] for i in order])


@dataclass
class PatchGrid:
    patch_size: int = 30
    overlap: int = 5
    origins: list = field(default_factory=list)
    frame_index: int = None
    frame_shape: tuple = None

    @property
    def stride(self):
        return self.patch_size - self.overlap


def patch_origins(length, s, stride):
    """Multiples of stride, plus a flush-edge origin when the last window misses the border."""
    origins = list(range(0, length - s + 1, stride))
    if (length - s) % stride != 0:
        origins.append(length - s)
    return origins


def extract_patches(frame, s=30, v=5, frame_index=None):
    """Cut a (H, W) or (C, H, W) frame into s x s patches; returns (N, C, s, s) and the grid."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3:
        raise DataError(f"frame must be (H, W) or (C, H, W), got shape {frame.shape}")
    stride = s - v
    if stride < 1 or v < 0:
        raise DataError(f"overlap {v} must be in [0, {s - 1}] for patch size {s}")
    _, height, width = frame.shape
    if height < s or width < s:
        raise DataError(f"frame {height}x{width} is smaller than patch size {s}")
    origins = [(r, c) for r in patch_origins(height, s, stride) for c in patch_origins(width, s, stride)]
    patches = np.stack([frame[:, r:r + s, c:c + s] for r, c in origins])
    grid = PatchGrid(patch_size=s, overlap=v, origins=origins, frame_index=frame_index,
                     frame_shape=(height, width))
    return patches, grid


def video_patches(frames, labels, s=30, v=5):
    """Patches of every frame with the frame's label and index attached."""
    batches, patch_labels, index = [], [], []
    for i, frame in enumerate(frames):
        patches, _ = extract_patches(frame, s, v, frame_index=i)
        batches.append(patches)
        patch_labels.append(np.full(len(patches), int(labels[i])))
        index.append(np.full(len(patches), i))
    return LabeledDataset(samples=np.concatenate(batches).astype(np.float32),
                          labels=np.concatenate(patch_labels), frame_index=np.concatenate(index))


def synth_ring(n, radius=1.0, width=0.05, seed=0):
    """2D points with radius ~ N(radius, width) and uniform angle."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    r = rng.normal(radius, width, size=n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).astype(np.float32)


def _smooth_texture(rng, height, width, scale):
    coarse = rng.uniform(-1, 1, size=(height // scale + 2, width // scale + 2))
    rows = np.linspace(0, coarse.shape[0] - 1.001, height)
    cols = np.linspace(0, coarse.shape[1] - 1.001, width)
    r0, c0 = rows.astype(int), cols.astype(int)
    fr, fc = (rows - r0)[:, None], (cols - c0)[None, :]
    top = coarse[r0][:, c0] * (1 - fc) + coarse[r0][:, c0 + 1] * fc
    bottom = coarse[r0 + 1][:, c0] * (1 - fc) + coarse[r0 + 1][:, c0 + 1] * fc
    return top * (1 - fr) + bottom * fr


def synth_video(frames, anomaly_frames=(), seed=0, height=60, width=90, pedestrians=2, scene_seed=None):
    """
    Textured background with smooth vertical 'pedestrian' sprites walking across.
    Anomalous frames also contain a square sprite with a checkerboard texture.
    scene_seed fixes the background and walkers; seed drives sensor noise and anomaly placement.
    Two clips with the same scene_seed show the same scene.
    Returns (frames (F, H, W) float32 in [-1, 1], labels (F,) int64).
    """
    anomaly_frames = set(int(f) for f in anomaly_frames)
    if any(f < 0 or f >= frames for f in anomaly_frames):
        raise DataError(f"anomaly frames {sorted(anomaly_frames)} must lie in [0, {frames})")
    scene_rng = np.random.default_rng(seed if scene_seed is None else scene_seed)
    rng = scene_rng if scene_seed is None else np.random.default_rng(seed)
    background = 0.25 * _smooth_texture(scene_rng, height, width, scale=8) - 0.2
    sprite_h, sprite_w = max(8, height // 3), max(4, width // 12)
    rows = scene_rng.integers(0, height - sprite_h, size=pedestrians)
    starts = scene_rng.uniform(0, width, size=pedestrians)
    speeds = scene_rng.uniform(0.5, 1.5, size=pedestrians) * scene_rng.choice([-1, 1], size=pedestrians)
    body = 0.5 + 0.2 * np.cos(np.linspace(-np.pi / 2, np.pi / 2, sprite_w))[None, :] * np.ones((sprite_h, 1))
    box = max(8, min(height, width) // 4)
    checker = np.where((np.add.outer(np.arange(box), np.arange(box)) // 2) % 2 == 0, 0.95, -0.95)

    video = np.empty((frames, height, width), dtype=np.float32)
    labels = np.zeros(frames, dtype=np.int64)
    for t in range(frames):
        frame = background + 0.03 * rng.standard_normal((height, width))
        for p in range(pedestrians):
            col = int(starts[p] + speeds[p] * t) % (width - sprite_w)
            frame[rows[p]:rows[p] + sprite_h, col:col + sprite_w] = body
        if t in anomaly_frames:
            r = int(rng.integers(0, height - box + 1))
            c = int(rng.integers(0, width - box + 1))
            frame[r:r + box, c:c + box] = checker
            labels[t] = 1
        video[t] = np.clip(frame, -1, 1)
    return video, labels


def save_video(frames, labels, out_dir):
    """One binary PGM per frame plus ground_truth.json."""
    os.makedirs(out_dir, exist_ok=True)
    for i, frame in enumerate(frames):
        pixels = np.clip(np.rint((np.asarray(frame) + 1.0) * 127.5), 0, 255).astype(np.uint8)
        with open(os.path.join(out_dir, f"frame_{i:04d}.pgm"), 'wb') as f:
            f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode('ascii'))
            f.write(pixels.tobytes())
    with open(os.path.join(out_dir, 'ground_truth.json'), 'w', encoding='utf-8') as f:
        json.dump({'frames': len(frames), 'labels': [int(l) for l in labels],
                   'anomaly_frames': [i for i, l in enumerate(labels) if l]}, f, indent=2)
    return out_dir


def _read_pgm(path):
    with open(path, 'rb') as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    if fields[0] != b'P5':
        raise DataError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise DataError(f"{path}: truncated raster")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float32) / (maxval / 2.0) - 1.0


def load_video(in_dir):
    with open(os.path.join(in_dir, 'ground_truth.json'), encoding='utf-8') as f:
        truth = json.load(f)
    frames = np.stack([_read_pgm(os.path.join(in_dir, f"frame_{i:04d}.pgm")) for i in range(truth['frames'])])
    return frames, np.asarray(truth['labels'], dtype=np.int64)
