"""Analytic luminance / reflectance guidance stacks and extended candidates."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .image_io import save_image
from .tensor import as_image

EPS = 1e-6

LUMINANCE_NAMES = ("Y_Rec709", "Y_vmax", "Y_lightness", "Y_L2")
REFLECTANCE_NAMES = ("Cb", "Cr", "r", "g", "S")
EXTENDED_NAMES = ("U", "V", "O1", "O2", "Y_mean", "Y_YCgCo")

# candidate pools examined when choosing the stacks
LUMINANCE_POOL = ("Y_Rec709", "Y_mean", "Y_YCgCo", "Y_vmax", "Y_lightness", "Y_L2")
CHROMA_POOL = ("Cb", "Cr", "U", "V", "O1", "O2", "r", "g", "S")

REC709 = (0.2126, 0.7152, 0.0722)
CB = (-0.168736, -0.331264, 0.5)
CR = (0.5, -0.418688, -0.081312)
YUV_U = (-0.14713, -0.28886, 0.43600)
YUV_V = (0.61500, -0.51499, -0.10001)
OPP_1 = (1 / math.sqrt(2), -1 / math.sqrt(2), 0.0)
OPP_2 = (1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6))
YCGCO_Y = (0.25, 0.50, 0.25)
L2_NORM = math.sqrt(3.0 + EPS)


@dataclass(frozen=True)
class GuidanceStack:
    tensor: np.ndarray
    descriptor_names: tuple[str, ...]
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "descriptor_names", tuple(self.descriptor_names))
        if self.tensor.ndim != 3 or self.tensor.shape[2] != len(self.descriptor_names):
            raise ValueError(
                f"stack tensor {self.tensor.shape} does not match {len(self.descriptor_names)} descriptor names"
            )
        if self.kind == "luminance" and self.descriptor_names != LUMINANCE_NAMES:
            raise ValueError(f"luminance stack must be {LUMINANCE_NAMES}")
        if self.kind == "reflectance" and self.descriptor_names != REFLECTANCE_NAMES:
            raise ValueError(f"reflectance stack must be {REFLECTANCE_NAMES}")
        if self.kind not in ("luminance", "reflectance", "extended"):
            raise ValueError(f"unknown stack kind {self.kind!r}")

    @property
    def K(self) -> int:
        return len(self.descriptor_names)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensor[:, :, self.descriptor_names.index(name)]

    def select(self, names) -> GuidanceStack:
        idx = [self.descriptor_names.index(n) for n in names]
        return GuidanceStack(self.tensor[:, :, idx], tuple(names), "extended")


def _rgb(img):
    img = np.asarray(img)
    if img.ndim < 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an RGB tensor (..., H, W, 3), got shape {img.shape}")
    return img[..., 0], img[..., 1], img[..., 2]


def _linear(img, coeffs):
    r, g, b = _rgb(img)
    return coeffs[0] * r + coeffs[1] * g + coeffs[2] * b


def _centered_unit(v, coeffs):
    # affine map of a zero-on-gray linear form onto [0, 1] using its extremes over the RGB cube
    bound = max(sum(c for c in coeffs if c > 0), -sum(c for c in coeffs if c < 0))
    return 0.5 + 0.5 * v / bound


def luminance_maps(img) -> dict[str, np.ndarray]:
    r, g, b = _rgb(img)
    vmax = np.maximum(np.maximum(r, g), b)
    vmin = np.minimum(np.minimum(r, g), b)
    return {
        "Y_Rec709": REC709[0] * r + REC709[1] * g + REC709[2] * b,
        "Y_vmax": vmax,
        "Y_lightness": 0.5 * (vmax + vmin),
        "Y_L2": np.sqrt(r * r + g * g + b * b + EPS) / L2_NORM,  # white maps to exactly 1
    }


def reflectance_maps(img) -> dict[str, np.ndarray]:
    r, g, b = _rgb(img)
    vmax = np.maximum(np.maximum(r, g), b)
    vmin = np.minimum(np.minimum(r, g), b)
    total = r + g + b + EPS
    return {
        "Cb": CB[0] * r + CB[1] * g + CB[2] * b + 0.5,
        "Cr": CR[0] * r + CR[1] * g + CR[2] * b + 0.5,
        "r": r / total,
        "g": g / total,
        "S": (vmax - vmin) / (vmax + EPS),
    }


def extended_maps(img) -> dict[str, np.ndarray]:
    r, g, b = _rgb(img)
    return {
        "U": _centered_unit(_linear(img, YUV_U), YUV_U),
        "V": _centered_unit(_linear(img, YUV_V), YUV_V),
        "O1": _centered_unit(_linear(img, OPP_1), OPP_1),
        "O2": _centered_unit(_linear(img, OPP_2), OPP_2),
        "Y_mean": (r + g + b) / 3.0,
        "Y_YCgCo": YCGCO_Y[0] * r + YCGCO_Y[1] * g + YCGCO_Y[2] * b,
    }


def _stack(maps, names, kind):
    return GuidanceStack(np.stack([maps[n] for n in names], axis=-1), names, kind)


def luminance_array(img) -> np.ndarray:
    """(..., H, W, 4) luminance stack; accepts batched input."""
    maps = luminance_maps(img)
    return np.stack([maps[n] for n in LUMINANCE_NAMES], axis=-1)


def reflectance_array(img) -> np.ndarray:
    """(..., H, W, 5) reflectance stack; accepts batched input."""
    maps = reflectance_maps(img)
    return np.stack([maps[n] for n in REFLECTANCE_NAMES], axis=-1)


def luminance_stack(img) -> GuidanceStack:
    return GuidanceStack(luminance_array(as_image(img, channels=3)), LUMINANCE_NAMES, "luminance")


def reflectance_stack(img) -> GuidanceStack:
    return GuidanceStack(reflectance_array(as_image(img, channels=3)), REFLECTANCE_NAMES, "reflectance")


def extended_candidates(img) -> GuidanceStack:
    return _stack(extended_maps(as_image(img, channels=3)), EXTENDED_NAMES, "extended")


def all_maps(img) -> dict[str, np.ndarray]:
    maps = luminance_maps(img)
    maps.update(reflectance_maps(img))
    maps.update(extended_maps(img))
    return maps


def candidate_stack(img, names) -> GuidanceStack:
    """Arbitrary selection of descriptors, e.g. ``LUMINANCE_POOL`` or ``CHROMA_POOL``."""
    return _stack(all_maps(as_image(img, channels=3)), tuple(names), "extended")


def dump_stack(stack: GuidanceStack, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i, name in enumerate(stack.descriptor_names):
        path = os.path.join(out_dir, f"{name}.png")
        save_image(stack.tensor[:, :, i:i + 1], path)
        written.append(path)
    return written
