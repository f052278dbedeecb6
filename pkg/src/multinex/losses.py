"""Hybrid training loss: weighted MSE, MS-SSIM and optional perceptual terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .metrics import max_scales, ms_ssim_value

# A perceptual feature extractor maps an (N, H, W, 3) image to a feature
# tensor. It must be written with multinex.autodiff primitives (or plain
# numpy operations that tolerate Value inputs) so gradients reach the
# prediction. Absent hook => the perceptual term is exactly zero.
FeatureExtractorHook = Optional[Callable]


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    msssim: float = 0.2
    perc: float = 0.01

    def __post_init__(self):
        if min(self.mse, self.msssim, self.perc) < 0:
            raise ValueError("loss weights must be non-negative")


class LossParts(NamedTuple):
    total: object
    mse: object
    msssim: object
    perc: object


def mse_loss(pred, gt):
    diff = ad.sub(pred, gt)
    return ad.mean(ad.mul(diff, diff))


def msssim_loss(pred, gt, scales: int | None = None):
    """1 - MS-SSIM, using as many scales (<= 5) as the image size allows."""
    h, w = ad.data_of(pred).shape[-3:-1]
    if scales is None:
        scales = max_scales(h, w)
    if scales == 0:
        raise ValueError(f"images of {h}x{w} are too small for the MS-SSIM loss")
    return ad.sub(1.0, ms_ssim_value(pred, gt, scales))


def perceptual_loss(pred, gt, hook):
    diff = ad.sub(hook(pred), hook(np.asarray(gt)))
    return ad.mean(ad.mul(diff, diff))


def loss_hybrid(pred, gt, weights: LossWeights = LossWeights(), hook: FeatureExtractorHook = None) -> LossParts:
    """Weighted sum of the three components, plus each raw component.

    The MS-SSIM component is reported as 0 only when its weight is zero and
    the image is too small to evaluate it; the perceptual component is 0
    whenever no hook is given.
    """
    gt = np.asarray(gt)
    if ad.data_of(pred).shape != gt.shape:
        raise ValueError(f"shape mismatch: {ad.data_of(pred).shape} vs {gt.shape}")
    zero = np.zeros((), dtype=ad.data_of(pred).dtype)
    mse = mse_loss(pred, gt)
    h, w = gt.shape[-3:-1]
    msssim = msssim_loss(pred, gt) if (weights.msssim > 0 or max_scales(h, w) > 0) else zero
    perc = perceptual_loss(pred, gt, hook) if hook is not None else zero
    total = ad.mul(weights.mse, mse)
    if weights.msssim > 0:
        total = ad.add(total, ad.mul(weights.msssim, msssim))
    if hook is not None and weights.perc > 0:
        total = ad.add(total, ad.mul(weights.perc, perc))
    return LossParts(total, mse, msssim, perc)
