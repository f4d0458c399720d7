"""Deterministic synthetic datasets and image export.

The one built-in dataset, "blobs", draws each sample from a Gaussian blob
whose center is determined by its class label, so an untrained classifier
still sees class-correlated structure.  Everything is seeded: the same
spec always yields the same samples in the same order.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def make_blobs(num_samples: int, num_classes: int, channels: int,
               image_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-centered Gaussian blob images in [0, 1].

    Returns (images, labels) with images float32 of shape
    (num_samples, channels, image_size, image_size).
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=num_samples)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    images = np.empty((num_samples, channels, image_size, image_size),
                      dtype=np.float32)
    for i, label in enumerate(labels):
        angle = 2.0 * np.pi * label / num_classes
        cx = 0.5 + 0.3 * np.cos(angle)
        cy = 0.5 + 0.3 * np.sin(angle)
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / 0.02))
        noise = rng.normal(0.0, 0.08, size=(channels, image_size, image_size))
        images[i] = np.clip(blob[None, :, :] + noise, 0.0, 1.0)
    return images, labels.astype(int)


DATASETS = {
    "blobs": make_blobs,
}


def make_dataset(name: str, num_samples: int, num_classes: int, channels: int,
                 image_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}, have {sorted(DATASETS)}")
    return DATASETS[name](num_samples, num_classes, channels, image_size, seed)


def write_image(image: np.ndarray, path: Path) -> None:
    """Write one sample as binary PGM (1 channel) or PPM (3 channels)."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, H, W) image, got {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    channels, height, width = pixels.shape
    magic = b"P5" if channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    # PNM interleaves channels per pixel; our array is channel-major
    body = np.moveaxis(pixels, 0, -1).tobytes()
    path.write_bytes(header + body)
