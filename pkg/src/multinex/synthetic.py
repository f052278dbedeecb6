"""Synthetic paired low-light data from well-exposed photographs.

A low-light version of a clean image is produced by a gamma curve, a global
exposure gain, a per-channel colour-temperature tilt, signal-dependent
(shot) plus read noise, and 8-bit quantisation. Source photographs default
to the natural colour images bundled with scikit-image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .image_io import quantize, save_image

SKIMAGE_PHOTOS = ("astronaut", "chelsea", "coffee", "rocket", "stereo_motorcycle", "immunohistochemistry")


@dataclass(frozen=True)
class LowLightModel:
    gain: tuple[float, float] = (0.08, 0.25)
    gamma: tuple[float, float] = (1.2, 1.8)
    tilt: float = 0.1
    shot_noise: float = 0.002
    read_noise: float = 0.002


def synthesize_low(gt: np.ndarray, rng: np.random.Generator, model: LowLightModel = LowLightModel()) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    gain = rng.uniform(*model.gain)
    gamma = rng.uniform(*model.gamma)
    tilt = 1 + rng.uniform(-model.tilt, model.tilt, size=3)
    clean = gain * tilt * gt ** gamma
    noisy = clean + rng.normal(size=gt.shape) * np.sqrt(model.shot_noise * clean + model.read_noise ** 2)
    return quantize(noisy).astype(np.float32) / 255


def load_photos(names=SKIMAGE_PHOTOS) -> list[np.ndarray]:
    from skimage import data

    photos = []
    for name in names:
        img = getattr(data, name)()
        if isinstance(img, tuple):  # stereo pairs: keep the left view
            img = img[0]
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        photos.append(img[:, :, :3].astype(np.float32) / 255)
    return photos


def make_pairs(n: int, size: int, seed: int = 0, photos=None, model: LowLightModel = LowLightModel()):
    """``n`` (low, gt) pairs of ``size`` x ``size`` crops cycling through the photos."""
    rng = np.random.default_rng(seed)
    photos = load_photos() if photos is None else photos
    pairs = []
    for i in range(n):
        photo = photos[i % len(photos)]
        H, W = photo.shape[:2]
        top = int(rng.integers(H - size + 1))
        left = int(rng.integers(W - size + 1))
        gt = quantize(photo[top:top + size, left:left + size]).astype(np.float32) / 255
        pairs.append((synthesize_low(gt, rng, model), gt))
    return pairs


def write_dataset(root, pairs) -> None:
    """Write pairs in the ``low/`` + ``high/`` layout read by PairedDataset."""
    for i, (low, gt) in enumerate(pairs):
        save_image(low, os.path.join(root, "low", f"{i:04d}.png"))
        save_image(gt, os.path.join(root, "high", f"{i:04d}.png"))
