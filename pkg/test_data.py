import gzip
import json
import struct

import numpy as np
import pytest
import requests

import data
from data import (
    ContaminationSpec, DataError, IdxFormatError, class_pools, contaminate, extract_patches, load_idx,
    load_video, patch_origins, save_video, synth_ring, synth_video, video_patches,
)


def write_idx_images(path, images, magic=0x00000803, opener=open):
    count, rows, cols = images.shape
    with opener(path, 'wb') as f:
        f.write(struct.pack('>IIII', magic, count, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, 'wb') as f:
        f.write(struct.pack('>II', 0x00000801, len(labels)))
        f.write(bytes(labels))


@pytest.fixture
def two_images():
    return np.array([[[0, 255, 128], [1, 2, 3]],
                     [[255, 255, 0], [9, 8, 7]]], dtype=np.uint8)


class TestIdx:
    def test_pixel_round_trip(self, tmp_path, two_images):
        path = tmp_path / 'images.idx'
        write_idx_images(path, two_images)
        images = load_idx(str(path))
        assert images.shape == (2, 1, 2, 3)
        assert images.dtype == np.float32
        np.testing.assert_array_equal(np.rint((images[:, 0] + 1) * 127.5).astype(np.uint8), two_images)
        assert images.min() == -1.0 and images.max() == 1.0

    def test_gzip(self, tmp_path, two_images):
        path = tmp_path / 'images.idx.gz'
        write_idx_images(path, two_images, opener=gzip.open)
        assert load_idx(str(path)).shape == (2, 1, 2, 3)

    def test_labels(self, tmp_path):
        path = tmp_path / 'labels.idx'
        write_idx_labels(path, [3, 8, 8])
        labels = load_idx(str(path))
        assert labels.dtype == np.uint8
        assert labels.tolist() == [3, 8, 8]

    def test_wrong_magic(self, tmp_path, two_images):
        path = tmp_path / 'bad.idx'
        write_idx_images(path, two_images, magic=0x00000804)
        with pytest.raises(IdxFormatError, match='magic'):
            load_idx(str(path))

    def test_truncated(self, tmp_path, two_images):
        path = tmp_path / 'short.idx'
        write_idx_images(path, two_images)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(IdxFormatError, match='expected 12 pixel bytes'):
            load_idx(str(path))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_idx(str(tmp_path / 'nope.idx'))


class FakeResponse:
    def __init__(self, content=b'idx', status=200):
        self.content = content
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.exceptions.HTTPError(f"{self.status_code}")


class TestFetchMnist:
    def test_downloads_missing_files_only(self, tmp_path, monkeypatch):
        (tmp_path / 'train-images-idx3-ubyte.gz').write_bytes(b'kept')
        requested = []
        monkeypatch.setattr(data.requests, 'get', lambda url, timeout: requested.append(url) or FakeResponse())
        paths = data.fetch_mnist(str(tmp_path), mirror='https://mirror.test/mnist/')
        assert len(requested) == 3
        assert all(url.startswith('https://mirror.test/mnist/') for url in requested)
        assert (tmp_path / 'train-images-idx3-ubyte.gz').read_bytes() == b'kept'
        assert (tmp_path / 't10k-labels-idx1-ubyte.gz').read_bytes() == b'idx'
        assert set(paths) == {'train_images', 'train_labels', 'test_images', 'test_labels'}

    def test_gives_up_after_retries(self, tmp_path, monkeypatch):
        calls = []
        monkeypatch.setattr(data.requests, 'get', lambda url, timeout: calls.append(url) or FakeResponse(status=503))
        monkeypatch.setattr(data.time, 'sleep', lambda seconds: None)
        with pytest.raises(DataError, match='cannot download'):
            data.fetch_mnist(str(tmp_path), mirror='https://mirror.test', retry_attempts=2)
        assert len(calls) == 2


class TestContaminate:
    @pytest.fixture
    def pools(self):
        inliers = np.arange(90 * 4, dtype=np.float32).reshape(90, 4)
        pool = -np.arange(1, 201 * 4 + 1, dtype=np.float32).reshape(201, 4)
        return inliers, pool

    def test_ten_percent(self, pools):
        inliers, pool = pools
        out = contaminate(inliers, pool, ContaminationSpec((8,), 0.1, seed=0))
        assert len(out) == 100
        assert out.counts() == {'normal': 90, 'anomaly': 10}

    def test_half(self, pools):
        inliers, pool = pools
        out = contaminate(inliers[:50], pool, ContaminationSpec((8,), 0.5, seed=0))
        assert out.counts() == {'normal': 50, 'anomaly': 50}

    def test_fixed_seed(self, pools):
        spec = ContaminationSpec((8,), 0.3, seed=7)
        a, b = contaminate(*pools, spec), contaminate(*pools, spec)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.labels, b.labels)

    def test_no_duplicates(self, pools):
        out = contaminate(*pools, ContaminationSpec((8,), 0.5, seed=1))
        assert len(np.unique(out.samples, axis=0)) == len(out)

    def test_pool_too_small(self, pools):
        inliers, pool = pools
        with pytest.raises(DataError, match='outlier pool'):
            contaminate(inliers, pool[:5], ContaminationSpec((8,), 0.5, seed=0))

    def test_fraction_range(self):
        with pytest.raises(ValueError, match='allow_out_of_range'):
            ContaminationSpec((8,), 0.6)
        assert ContaminationSpec((8,), 0.6, allow_out_of_range=True).outlier_fraction == 0.6

    def test_class_pools(self):
        images = np.arange(5)
        inliers, pool = class_pools(images, np.array([8, 1, 8, 3, 8]), [8])
        assert inliers.tolist() == [0, 2, 4]
        assert pool.tolist() == [1, 3]


def count_windows(length, s, stride):
    """Independent origin count: regular windows plus one flush window if the border is missed."""
    regular = (length - s) // stride + 1
    last_end = (regular - 1) * stride + s
    return regular + (1 if last_end < length else 0)


class TestPatches:
    def test_ped2_sized_frame(self):
        patches, grid = extract_patches(np.zeros((240, 360)), s=30, v=5)
        assert patches.shape == (150, 1, 30, 30)
        assert len(grid.origins) == 150
        assert grid.stride == 25

    def test_single_window(self):
        patches, grid = extract_patches(np.zeros((30, 30)), s=30, v=5)
        assert len(patches) == 1
        assert grid.origins == [(0, 0)]

    def test_two_windows_on_long_axis(self):
        assert patch_origins(55, 30, 25) == [0, 25]
        patches, _ = extract_patches(np.zeros((55, 30)), s=30, v=5)
        assert len(patches) == 2

    def test_counting_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            s = int(rng.integers(1, 40))
            v = int(rng.integers(0, s))
            h, w = int(rng.integers(s, 150)), int(rng.integers(s, 150))
            patches, _ = extract_patches(np.zeros((h, w), dtype=np.float32), s=s, v=v)
            assert len(patches) == count_windows(h, s, s - v) * count_windows(w, s, s - v), (h, w, s, v)

    def test_covers_every_pixel(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            s = int(rng.integers(2, 20))
            v = int(rng.integers(0, s))
            h, w = int(rng.integers(s, 80)), int(rng.integers(s, 80))
            _, grid = extract_patches(np.zeros((h, w)), s=s, v=v)
            covered = np.zeros((h, w), dtype=bool)
            for r, c in grid.origins:
                covered[r:r + s, c:c + s] = True
            assert covered.all()

    def test_patch_content(self):
        frame = np.arange(60 * 90, dtype=np.float32).reshape(60, 90)
        patches, grid = extract_patches(frame, s=30, v=5)
        for patch, (r, c) in zip(patches, grid.origins):
            np.testing.assert_array_equal(patch[0], frame[r:r + 30, c:c + 30])

    def test_frame_too_small(self):
        with pytest.raises(DataError, match='smaller than patch size'):
            extract_patches(np.zeros((20, 40)), s=30, v=5)

    def test_video_patches_carry_frame_index(self):
        frames = np.zeros((3, 30, 55), dtype=np.float32)
        out = video_patches(frames, [0, 1, 0], s=30, v=5)
        assert out.frame_index.tolist() == [0, 0, 1, 1, 2, 2]
        assert out.labels.tolist() == [0, 0, 1, 1, 0, 0]


class TestSynthetic:
    def test_ring_mean_norm(self):
        points = synth_ring(1000, radius=1.0, width=0.05, seed=0)
        assert 0.95 <= np.linalg.norm(points, axis=1).mean() <= 1.05

    def test_ring_rejects_empty(self):
        with pytest.raises(ValueError):
            synth_ring(0)

    def test_ring_deterministic(self):
        assert np.array_equal(synth_ring(50, seed=4), synth_ring(50, seed=4))

    def test_video_labels(self):
        frames, labels = synth_video(10, {3, 7}, seed=0)
        assert labels.tolist() == [0, 0, 0, 1, 0, 0, 0, 1, 0, 0]
        assert frames.shape == (10, 60, 90)
        assert frames.min() >= -1 and frames.max() <= 1

    def test_video_without_anomalies(self):
        _, labels = synth_video(6, (), seed=0)
        assert not labels.any()

    def test_video_deterministic(self):
        a, _ = synth_video(5, {2}, seed=9)
        b, _ = synth_video(5, {2}, seed=9)
        assert np.array_equal(a, b)

    def test_video_anomaly_range(self):
        with pytest.raises(DataError):
            synth_video(5, {5})

    def test_video_scene_shared_across_seeds(self):
        a, _ = synth_video(3, (), seed=1, scene_seed=42)
        b, _ = synth_video(3, {2}, seed=2, scene_seed=42)
        other, _ = synth_video(3, (), seed=1, scene_seed=43)
        same_scene = np.median(np.abs(a[0] - b[0]))
        assert same_scene < 0.06
        assert np.median(np.abs(a[0] - other[0])) > same_scene

    def test_pgm_round_trip(self, tmp_path):
        frames, labels = synth_video(4, {1}, seed=2, height=32, width=40)
        save_video(frames, labels, str(tmp_path))
        truth = json.loads((tmp_path / 'ground_truth.json').read_text())
        assert truth['anomaly_frames'] == [1]
        loaded, loaded_labels = load_video(str(tmp_path))
        assert loaded.shape == frames.shape
        np.testing.assert_allclose(loaded, frames, atol=1 / 127.5)
        assert loaded_labels.tolist() == labels.tolist()
