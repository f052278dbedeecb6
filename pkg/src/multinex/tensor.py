"""Dense (H, W, C) tensors and the element-wise family used by the formulas.

Tensors are plain numpy arrays in row-major (H, W, C) layout. ``float32`` is
the model dtype; ``float64`` is used on verification paths.
"""

from __future__ import annotations

import numpy as np

MODEL_DTYPE = np.float32
CHECK_DTYPE = np.float64


def as_image(x, channels: int | None = None, dtype=None) -> np.ndarray:
    """Validate an (H, W, C) tensor, optionally enforcing the channel count."""
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) tensor, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[2]}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


def channel(x: np.ndarray, i: int) -> np.ndarray:
    """The i-th (H, W) slice along the depth."""
    if not 0 <= i < x.shape[-1]:
        raise IndexError(f"channel {i} out of range for {x.shape[-1]} channels")
    return x[..., i]


def _check_zip(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if a.shape[:-1] == b.shape[:-1] and 1 in (a.shape[-1], b.shape[-1]):
        return
    raise ValueError(f"shape mismatch {a.shape} vs {b.shape}: only a single-channel operand may broadcast")


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_zip(a, b)
    return a * b


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_zip(a, b)
    return a + b


def elementwise_max(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_zip(a, b)
    return np.maximum(a, b)


def elementwise_min(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_zip(a, b)
    return np.minimum(a, b)


def reduce_mean(x) -> float:
    return float(np.mean(x, dtype=np.float64))


def clamp01(x) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)
