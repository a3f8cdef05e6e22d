"""Image decoding and augmentation.

Images are float32 ``(H, W, C)`` arrays in ``[0, 1]``.  All randomness comes
from an explicit ``numpy.random.Generator`` so a record's augmentation is a pure
function of its sub-seed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class AugmentationPolicy:
    """Parameter ranges for each augmentation; a zero range disables it.

    ``unflagged_prob`` is the chance that a record *without* the augment flag
    is also augmented (flagged records always are).
    """

    flip_prob: float = 0.5
    crop_jitter: float = 0.125
    brightness: float = 0.15
    contrast: float = 0.2
    blur_sigma: float = 0.6
    unflagged_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        for name in ("flip_prob", "unflagged_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        for name in ("crop_jitter", "brightness", "contrast", "blur_sigma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.crop_jitter >= 0.5:
            raise ConfigurationError("crop_jitter must be below 0.5")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(flip_prob=0.0, crop_jitter=0.0, brightness=0.0, contrast=0.0, blur_sigma=0.0)

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(enabled=False)

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=65536)
def _decode(ref: str, size: int, channels: int) -> np.ndarray:
    try:
        with Image.open(ref) as im:
            mode = {1: "L", 3: "RGB", 4: "RGBA"}[channels]
            im = im.convert(mode)
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, KeyError) as exc:
        raise DataError(f"cannot read image {ref!r}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr.setflags(write=False)
    return arr


def load_image(ref: str | Path, size: int, channels: int = 3) -> np.ndarray:
    """Decode and resize to ``size x size``; results are cached and read-only."""
    return _decode(str(ref), size, channels)


def flip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def crop_jitter(image: np.ndarray, max_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Translate by up to ``max_frac`` of the side, filling with reflected pixels."""
    h, w, _ = image.shape
    pad = int(round(max_frac * max(h, w)))
    if pad == 0:
        return image.copy()
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return padded[dy:dy + h, dx:dx + w].copy()


def color_jitter(image: np.ndarray, brightness: float, contrast: float,
                 rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(-brightness, brightness)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast)
    mean = image.mean(axis=(0, 1), keepdims=True)
    return np.clip((image - mean) * c + mean + b, 0.0, 1.0).astype(np.float32)


def blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect").astype(np.float32)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply every enabled augmentation in the policy once."""
    out = np.array(image, dtype=np.float32, copy=True)
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = flip(out)
    if policy.crop_jitter > 0:
        out = crop_jitter(out, policy.crop_jitter, rng)
    if policy.brightness > 0 or policy.contrast > 0:
        out = color_jitter(out, policy.brightness, policy.contrast, rng)
    if policy.blur_sigma > 0:
        out = blur(out, rng.uniform(0.0, policy.blur_sigma))
    return out


# Enrollment augmentations: flip, two crop-jitters, brightness jitter, repeating.
EnrollAugment = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def default_enroll_augment(image: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    kind = (k - 1) % 4
    if kind == 0:
        return flip(image)
    if kind in (1, 2):
        return crop_jitter(image, 0.125, rng)
    return color_jitter(image, 0.15, 0.0, rng)


def identity_augment(image: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.array(image, dtype=np.float32, copy=True)
