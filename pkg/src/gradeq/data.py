"""Image batches: CIFAR binary ingestion, synthetic blobs, cutout.

All pixels live in [0,1]; attacks and attributions consume this space
directly. A batch carries the scalar mean/std of its training split so
occlusion fills and the deviation analysis reference one agreed pair of
statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .seeding import seed_stream


@dataclass(frozen=True)
class ImageBatch:
    pixels: np.ndarray  # [N, C, H, W], float64, values in [0, 1]
    labels: np.ndarray  # [N], int64
    classes: int
    mean: float  # scalar pixel stats of the originating training split
    std: float

    def __post_init__(self):
        assert self.pixels.ndim == 4, f"expected [N,C,H,W], got {self.pixels.shape}"
        assert len(self.labels) == len(self.pixels)
        assert self.pixels.min() >= 0.0 and self.pixels.max() <= 1.0
        assert self.labels.min() >= 0 and self.labels.max() < self.classes

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.pixels.shape[1:]

    def subset(self, idx) -> "ImageBatch":
        """Row selection; inherits this batch's statistics."""
        return replace(self, pixels=self.pixels[idx], labels=self.labels[idx])

    def normalized(self) -> np.ndarray:
        return (self.pixels - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def _with_stats(pixels, labels, classes) -> ImageBatch:
    return ImageBatch(pixels, labels, classes,
                      float(pixels.mean()), float(pixels.std()))


_CIFAR_VARIANTS = {
    "cifar10": (1, 10),  # label bytes per record, class count
    "cifar100": (2, 100),  # coarse byte then fine byte; fine is the label
}


def load_cifar(path, variant: str = "cifar10") -> ImageBatch:
    """Parse the CIFAR binary layout: label byte(s), then 3072 pixel bytes
    as full R, G, B planes of a row-major 32x32 image, scaled by 1/255."""
    if variant not in _CIFAR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    label_bytes, classes = _CIFAR_VARIANTS[variant]
    record = label_bytes + 3072
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise ValueError(
            f"file size {raw.size} is not a positive multiple of record size {record}"
        )
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)  # fine label for cifar100
    if labels.max() >= classes:
        raise ValueError(f"label {labels.max()} out of range for {classes} classes")
    pixels = rows[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return _with_stats(pixels, labels, classes)


def export_cifar10(batch: ImageBatch, path) -> None:
    """Write a batch in the CIFAR-10 record layout (pixels quantized to bytes)."""
    n, c, h, w = batch.pixels.shape
    if (c, h, w) != (3, 32, 32):
        raise ValueError(f"CIFAR-10 layout needs [N,3,32,32], got {batch.pixels.shape}")
    quantized = np.round(batch.pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        for label, img in zip(batch.labels, quantized):
            f.write(bytes([int(label)]))
            f.write(img.tobytes())


def blob_centers(resolution: int, classes: int) -> np.ndarray:
    """Class-specific blob centers, evenly spaced on a centered circle."""
    angles = 2.0 * np.pi * np.arange(classes) / classes + np.pi / 4.0
    radius = resolution / 4.0
    mid = (resolution - 1) / 2.0
    return np.stack([mid + radius * np.sin(angles), mid + radius * np.cos(angles)], axis=1)


def synth_blobs(n: int, resolution: int = 32, classes: int = 4, seed: int = 0,
                channels: int = 1, background: float = 0.2, amplitude: float = 0.5,
                spread: float = 4.0, noise: float = 0.15, jitter: float = 2.0) -> ImageBatch:
    """Class-conditional Gaussian bumps over a noisy background.

    Each image is background + a bump of the class's characteristic
    location (jittered a little per sample) + pixel noise, clipped to
    [0,1]. Classes are balanced round-robin and the whole batch is a pure
    function of the seed.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = seed_stream(seed, "blobs", resolution, classes)
    labels = np.arange(n, dtype=np.int64) % classes
    centers = blob_centers(resolution, classes)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    offsets = rng.uniform(-jitter, jitter, size=(n, 2))
    cy = centers[labels, 0] + offsets[:, 0]
    cx = centers[labels, 1] + offsets[:, 1]
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    bumps = amplitude * np.exp(-d2 / (2.0 * spread**2))
    field = background + bumps + rng.normal(0.0, noise, size=bumps.shape)
    pixels = np.clip(field[:, None, :, :], 0.0, 1.0)
    if channels > 1:
        pixels = np.repeat(pixels, channels, axis=1)
    return _with_stats(pixels, labels, classes)


def train_val_split(batch: ImageBatch, val_fraction: float, seed: int) -> tuple[ImageBatch, ImageBatch]:
    """Deterministic shuffle-split; both halves keep the train half's stats."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    order = seed_stream(seed, "split").permutation(len(batch))
    n_val = max(1, int(round(len(batch) * val_fraction)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    train = _with_stats(batch.pixels[train_idx], batch.labels[train_idx], batch.classes)
    val = ImageBatch(batch.pixels[val_idx], batch.labels[val_idx], batch.classes,
                     train.mean, train.std)
    return train, val


def _hole_range(center: int, hole: int, extent: int) -> tuple[int, int]:
    # A hole as large as the dimension always covers it fully; smaller
    # holes are clipped at the borders.
    if hole >= extent:
        return 0, extent
    lo = center - hole // 2
    return max(0, lo), min(extent, lo + hole)


def cutout(batch: ImageBatch, hole_size: int, rng: np.random.Generator) -> ImageBatch:
    """Per image, square hole of side hole_size at a uniform random center,
    filled with the batch's scalar mean pixel value."""
    n, c, h, w = batch.pixels.shape
    if not 0 <= hole_size <= min(h, w):
        raise ValueError(f"hole_size must be in [0, {min(h, w)}], got {hole_size}")
    if hole_size == 0:
        return batch
    pixels = batch.pixels.copy()
    cy = rng.integers(0, h, size=n)
    cx = rng.integers(0, w, size=n)
    for i in range(n):
        y0, y1 = _hole_range(int(cy[i]), hole_size, h)
        x0, x1 = _hole_range(int(cx[i]), hole_size, w)
        pixels[i, :, y0:y1, x0:x1] = batch.mean
    return replace(batch, pixels=pixels)
