import numpy as np
import pytest

from acnet.data import (CIFAR_RECORD, PATTERNS, AugmentConfig, DataFormatError, Dataset, _pattern, augment,
                        gen_synthetic, load_cifar10_binary, oriented_energy_features, parse_cifar10_bytes,
                        write_cifar10_binary)


def random_records(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, n)


class TestCifar:
    def test_length_arithmetic(self, tmp_path):
        px, lb = random_records(7)
        write_cifar10_binary(tmp_path / "b.bin", px, lb)
        assert (tmp_path / "b.bin").stat().st_size == 7 * CIFAR_RECORD
        data = load_cifar10_binary(tmp_path / "b.bin")
        assert len(data) == 7 and data.images.shape == (7, 3, 32, 32)

    def test_zero_record(self):
        images, labels = parse_cifar10_bytes(bytes(CIFAR_RECORD))
        assert labels.tolist() == [0] and not images.any()

    def test_round_trip(self, tmp_path):
        px, lb = random_records(5, seed=1)
        write_cifar10_binary(tmp_path / "b.bin", px, lb)
        data = load_cifar10_binary(tmp_path / "b.bin", dtype=np.float64)
        np.testing.assert_array_equal(np.round(data.images * 255).astype(np.uint8), px)
        np.testing.assert_array_equal(data.labels, lb)
        assert 0 <= data.images.min() and data.images.max() <= 1

    def test_channel_planar_order(self):
        raw = bytearray(CIFAR_RECORD)
        raw[1 + 1024 + 32 * 2 + 5] = 255  # green plane, row 2, column 5
        images, _ = parse_cifar10_bytes(bytes(raw))
        assert images[0, 1, 2, 5] == 255 and images.sum() == 255

    def test_normalize(self, tmp_path):
        px, lb = random_records(3, seed=2)
        write_cifar10_binary(tmp_path / "b.bin", px, lb)
        raw = load_cifar10_binary(tmp_path / "b.bin")
        norm = load_cifar10_binary(tmp_path / "b.bin", normalize=True)
        np.testing.assert_allclose(norm.images[:, 0], (raw.images[:, 0] - 0.4914) / 0.2470, rtol=1e-5)

    def test_truncated(self, tmp_path):
        px, lb = random_records(2)
        write_cifar10_binary(tmp_path / "b.bin", px, lb)
        blob = (tmp_path / "b.bin").read_bytes()
        (tmp_path / "b.bin").write_bytes(blob[:-1])
        with pytest.raises(DataFormatError, match="multiple"):
            load_cifar10_binary(tmp_path / "b.bin")

    def test_bad_label(self):
        raw = bytearray(2 * CIFAR_RECORD)
        raw[CIFAR_RECORD] = 10
        with pytest.raises(DataFormatError, match="record 1"):
            parse_cifar10_bytes(bytes(raw))


class TestDataset:
    def test_label_range(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 3]), 3)

    def test_count_mismatch(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 1, 4, 4)), np.array([0]), 3)

    def test_npz_round_trip(self, tmp_path):
        data = gen_synthetic(12, seed=1)
        data.save(tmp_path / "d.npz")
        back = Dataset.load(tmp_path / "d.npz")
        np.testing.assert_array_equal(back.images, data.images)
        np.testing.assert_array_equal(back.labels, data.labels)
        assert back.class_count == 4


class TestSynthetic:
    def test_deterministic(self):
        a, b = gen_synthetic(50, seed=3), gen_synthetic(50, seed=3)
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert gen_synthetic(50, seed=4).images.tobytes() != a.images.tobytes()

    @pytest.mark.parametrize("classes", [2, 4, 6])
    def test_balanced(self, classes):
        data = gen_synthetic(classes * 7, seed=0, classes=classes)
        assert np.bincount(data.labels, minlength=classes).tolist() == [7] * classes

    def test_range_and_shape(self):
        data = gen_synthetic(10, size=12)
        assert data.images.shape == (10, 1, 12, 12)
        assert 0 <= data.images.min() and data.images.max() <= 1

    def test_bad_classes(self):
        with pytest.raises(ValueError):
            gen_synthetic(10, classes=1)

    @pytest.mark.parametrize("kind", PATTERNS)
    def test_patterns_are_mirror_symmetric(self, kind):
        grid = np.linspace(-0.5, 0.5, 11)
        v, u = np.meshgrid(grid, grid, indexing="ij")
        mirror_phase = np.pi - 0.7 if kind == "vertical" else 0.7
        np.testing.assert_allclose(_pattern(kind, -u, v, 2.2, 0.7), _pattern(kind, u, v, 2.2, mirror_phase),
                                   atol=1e-12)

    def test_linear_features_separate(self):
        train, test = gen_synthetic(2000, seed=0), gen_synthetic(1000, seed=1)
        ftr, fte = oriented_energy_features(train.images), oriented_energy_features(test.images)
        mu, sd = ftr.mean(axis=0), ftr.std(axis=0)
        ftr, fte = (ftr - mu) / sd, (fte - mu) / sd
        ftr, fte = np.c_[ftr, np.ones(len(ftr))], np.c_[fte, np.ones(len(fte))]
        # ridge regression onto one-hot targets
        targets = np.eye(4)[train.labels]
        w = np.linalg.solve(ftr.T @ ftr + 0.1 * np.eye(ftr.shape[1]), ftr.T @ targets)
        assert (np.argmax(fte @ w, axis=1) == test.labels).mean() >= 0.90


class TestAugment:
    x = np.random.default_rng(0).random((6, 2, 5, 5)).astype(np.float32)

    def test_identity(self):
        out = augment(self.x, AugmentConfig(pad=0, flip_prob=0), np.random.default_rng(0))
        np.testing.assert_array_equal(out, self.x)

    def test_double_flip(self):
        cfg = AugmentConfig(pad=0, flip_prob=1)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(augment(augment(self.x, cfg, rng), cfg, rng), self.x)

    def test_flip_preserves_pixels(self):
        out = augment(self.x, AugmentConfig(pad=0, flip_prob=0.5), np.random.default_rng(1))
        for a, b in zip(out, self.x):
            np.testing.assert_array_equal(np.sort(a, axis=None), np.sort(b, axis=None))

    def test_replayed_offsets(self):
        offsets = np.tile([[0, 4]], (6, 1))
        out = augment(self.x, AugmentConfig(pad=2, flip_prob=0), np.random.default_rng(0), offsets=offsets)
        assert out.shape == self.x.shape
        np.testing.assert_array_equal(out[:, :, 2:, :3], self.x[:, :, :3, 2:])
        assert not out[:, :, :2].any() and not out[:, :, :, 3:].any()

    def test_cardinality(self):
        out = augment(self.x, AugmentConfig(), np.random.default_rng(2))
        assert out.shape == self.x.shape and out.dtype == self.x.dtype

    def test_crop_too_large(self):
        with pytest.raises(ValueError, match="exceeds"):
            augment(self.x, AugmentConfig(pad=1, crop=8), np.random.default_rng(0))
