"""Procedurally generated product-image datasets for desk-scale runs.

Each class is a fixed "packshot" (background, a few colored shapes, one striped
panel).  Every image of the class is that packshot under a random shift,
lighting cast, occluding patch and sensor noise, so raw pixel statistics are a
poor cue and an encoder has to learn which structure identifies the product.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .balancing import Record


def packshot(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = rng.uniform(0.1, 0.9, size=3)
    for _ in range(3):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        ry, rx = rng.uniform(0.1, 0.3, size=2) * size
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        img[mask] = color
    # striped panel
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(0.25, 0.8)
    stripes = 0.5 + 0.5 * np.sign(np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy)))
    y0, x0 = rng.integers(0, size // 2, size=2)
    h, w = rng.integers(size // 4, size // 2, size=2)
    panel = np.zeros((size, size), dtype=bool)
    panel[y0:y0 + h, x0:x0 + w] = True
    c1, c2 = rng.uniform(0, 1, size=(2, 3))
    img[panel] = (stripes[panel, None] * c1 + (1 - stripes[panel, None]) * c2)
    return img


def observe(proto: np.ndarray, rng: np.random.Generator, shift: int = 3, gain: float = 0.4,
            offset: float = 0.15, noise: float = 0.06, occluder: int = 10) -> np.ndarray:
    """One noisy photograph of a packshot."""
    size = proto.shape[0]
    dy, dx = rng.integers(-shift, shift + 1, size=2)
    img = np.roll(proto, (int(dy), int(dx)), axis=(0, 1))
    img = img * rng.uniform(1 - gain, 1 + gain, size=3) + rng.uniform(-offset, offset, size=3)
    if occluder > 0:
        h, w = rng.integers(2, occluder + 1, size=2)
        y0, x0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, size=3)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def long_tail_sizes(n_classes: int, smallest: int = 3, largest: int = 200) -> list[int]:
    """Geometrically spaced class sizes from ``largest`` down to ``smallest``."""
    if n_classes == 1:
        return [largest]
    ratio = (smallest / largest) ** (1.0 / (n_classes - 1))
    return [max(smallest, int(round(largest * ratio ** i))) for i in range(n_classes)]


def write_dataset(out_dir: str | Path, sizes: Sequence[int], n_test: int = 20, image_size: int = 32,
                  seed: int = 0, prefix: str = "product") -> tuple[list[Record], list[Record]]:
    """Render classes to PNG files.

    Returns ``(train, test)`` records; class ``i`` gets ``sizes[i]`` train
    images and ``n_test`` test images.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for ci, n_train in enumerate(sizes):
        label = f"{prefix}_{ci:03d}"
        proto = packshot(rng, image_size)
        for split, count, bucket in (("train", n_train, train), ("test", n_test, test)):
            for k in range(count):
                path = out_dir / f"{label}_{split}_{k:04d}.png"
                pixels = (observe(proto, rng) * 255.0 + 0.5).astype(np.uint8)
                Image.fromarray(pixels).save(path)
                bucket.append(Record(str(path), label, split))
    return train, test
