"""Datasets: CIFAR-10 binary batches, a synthetic oriented-pattern set, augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (n, c, h, w)
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataFormatError(f"{len(self.labels)} labels for {len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def save(self, path):
        np.savez(path, images=self.images, labels=self.labels, class_count=self.class_count)

    @classmethod
    def load(cls, path) -> Dataset:
        with np.load(path) as f:
            return cls(f["images"], f["labels"].astype(np.int64), int(f["class_count"]))


# -- CIFAR-10 ------------------------------------------------------------------


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{source}: length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_binary(paths, normalize: bool = False, dtype=np.float32) -> Dataset:
    """Read CIFAR-10 binary batch files (label byte + 3072 channel-planar pixels per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    pixels, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            px, lb = parse_cifar10_bytes(f.read(), str(path))
        pixels.append(px)
        labels.append(lb)
    images = np.concatenate(pixels).astype(dtype) / 255.0
    if normalize:
        images = (images - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]
        images = images.astype(dtype)
    return Dataset(images, np.concatenate(labels), 10)


def write_cifar10_binary(path, pixels: np.ndarray, labels) -> None:
    """Write uint8 ``pixels`` (n, 3, 32, 32) and ``labels`` as CIFAR-10 records."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def cifar10_dir(root) -> tuple[Dataset, Dataset]:
    """Train (data_batch_1..5) and test (test_batch) splits of an extracted CIFAR-10 directory."""
    train = [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)]
    return load_cifar10_binary(train), load_cifar10_binary(os.path.join(root, "test_batch.bin"))


# -- synthetic oriented patterns -------------------------------------------------

PATTERNS = ("horizontal", "vertical", "chevron-up", "chevron-down", "rings", "checker")


def _pattern(kind, u, v, freq, phase):
    tau = 2 * np.pi * freq
    if kind == "horizontal":
        return np.sin(tau * v + phase)
    if kind == "vertical":
        return np.sin(tau * u + phase)
    if kind == "chevron-up":  # apex at the top
        return np.sin(tau * (v - np.abs(u)) + phase)
    if kind == "chevron-down":
        return np.sin(tau * (v + np.abs(u)) + phase)
    if kind == "rings":
        return np.sin(tau * np.hypot(u, v) + phase)
    return np.cos(tau * u) * np.sin(tau * v + phase)


def gen_synthetic(n: int, seed: int = 0, size: int = 16, classes: int = 4,
                  noise: float = 0.6, dtype=np.float32) -> Dataset:
    """Grayscale images whose class is a stripe pattern family.

    Families, in class order: horizontal stripes, vertical stripes, upward
    and downward chevrons, rings, checkers.  Every family is closed under a
    left-right mirror (vertical stripes map to phase pi - phase, the others to
    themselves), so left-right flip augmentation never changes a label,
    while quarter turns and up-down flips do.  Frequency, phase, contrast and
    the chevron apex are randomized per image; Gaussian pixel noise is added.
    """
    if not 2 <= classes <= len(PATTERNS):
        raise ValueError(f"classes must lie in [2, {len(PATTERNS)}]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    grid = (np.arange(size) - (size - 1) / 2) / size
    v, u = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, 1, size, size))
    for i, label in enumerate(labels):
        freq = rng.uniform(1.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        contrast = rng.uniform(0.25, 0.45)
        du, dv = rng.uniform(-0.12, 0.12, 2)
        pat = _pattern(PATTERNS[label], u - du, v - dv, freq, phase)
        images[i, 0] = 0.5 + contrast * pat + noise * rng.standard_normal((size, size))
    return Dataset(np.clip(images, 0, 1).astype(dtype), labels.astype(np.int64), classes)


def oriented_energy_features(images: np.ndarray, freqs=(2.0, 3.0), orientations: int = 4,
                             sigma: float = 2.0) -> np.ndarray:
    """Log quadrature-Gabor energy per (frequency, orientation, image quadrant).

    ``freqs`` are in cycles per image width; the complex Gabor response's
    squared modulus is phase invariant, so the features see stripe direction
    and placement but not stripe phase.
    """
    x = images[:, 0].astype(np.float64)
    x = x - x.mean(axis=(1, 2), keepdims=True)
    n, h, w = x.shape
    spectrum = np.fft.fft2(x, s=(2 * h, 2 * w))
    r = np.arange(-(h // 2), h // 2 + 1)
    vv, uu = np.meshgrid(r, r, indexing="ij")
    envelope = np.exp(-(uu ** 2 + vv ** 2) / (2 * sigma ** 2))
    feats = []
    for f in freqs:
        for k in range(orientations):
            theta = np.pi * k / orientations
            kernel = envelope * np.exp(2j * np.pi * f / w * (uu * np.cos(theta) + vv * np.sin(theta)))
            resp = np.fft.ifft2(spectrum * np.fft.fft2(kernel, s=(2 * h, 2 * w)))
            energy = np.abs(resp[:, h // 2:h // 2 + h, h // 2:h // 2 + w]) ** 2
            for rows in (slice(0, h // 2), slice(h // 2, h)):
                for cols in (slice(0, w // 2), slice(w // 2, w)):
                    feats.append(energy[:, rows, cols].mean(axis=(1, 2)))
    return np.log(np.stack(feats, axis=1) + 1e-6)


# -- augmentation ------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 2  # zero border added on every side before cropping
    crop: int | None = None  # crop extent; None keeps the original size
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0 or not 0 <= self.flip_prob <= 1:
            raise ValueError("pad must be >= 0 and flip_prob in [0, 1]")


def augment(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            offsets: np.ndarray | None = None, flips: np.ndarray | None = None) -> np.ndarray:
    """Zero-pad, randomly crop back and randomly mirror left-right each image.

    ``offsets`` (n, 2) and ``flips`` (n,) may be passed to replay a draw.
    """
    n, c, h, w = images.shape
    crop_h = h if config.crop is None else config.crop
    crop_w = w if config.crop is None else config.crop
    p = config.pad
    if crop_h > h + 2 * p or crop_w > w + 2 * p:
        raise ValueError(f"crop {crop_h}x{crop_w} exceeds padded extent {h + 2 * p}x{w + 2 * p}")
    if offsets is None:
        offsets = np.stack([rng.integers(0, h + 2 * p - crop_h + 1, n),
                            rng.integers(0, w + 2 * p - crop_w + 1, n)], axis=1)
    if flips is None:
        flips = rng.random(n) < config.flip_prob
    padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((n, c, crop_h, crop_w), dtype=images.dtype)
    for i in range(n):
        r, s = offsets[i]
        patch = padded[i, :, r:r + crop_h, s:s + crop_w]
        out[i] = patch[:, :, ::-1] if flips[i] else patch
    return out
