"""Full-reference quality metrics: PSNR, SSIM, MS-SSIM and GT-Mean rescaling.

SSIM and MS-SSIM are evaluated on the BT.709 luminance projection of RGB
inputs, with an 11x11 Gaussian window (sigma 1.5) applied in 'valid' mode
and 2x average pooling between scales. They are built from
:mod:`multinex.autodiff` primitives so the training loss differentiates the
exact same computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LUMA = (0.2126, 0.7152, 0.0722)
PSNR_CAP = 100.0


def gaussian_taps(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def luma(x):
    """(..., H, W, 3) -> (..., H, W, 1) BT.709 projection (pass-through for 1 channel)."""
    xd = ad.data_of(x)
    if xd.shape[-1] == 1:
        return x
    return ad.conv1x1(x, np.asarray(LUMA, dtype=xd.dtype).reshape(3, 1))


def _check_pair(pred, gt):
    if ad.data_of(pred).shape != np.shape(ad.data_of(gt)):
        raise ValueError(f"shape mismatch: {ad.data_of(pred).shape} vs {np.shape(ad.data_of(gt))}")


def min_size(scales: int) -> int:
    return WINDOW * 2 ** (scales - 1)


def _ssim_terms(x, y, taps):
    mu_x = ad.gaussian_filter_valid(x, taps)
    mu_y = ad.gaussian_filter_valid(y, taps)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = ad.gaussian_filter_valid(x * x, taps) - mu_xx
    s_yy = ad.gaussian_filter_valid(y * y, taps) - mu_yy
    s_xy = ad.gaussian_filter_valid(x * y, taps) - mu_xy
    lum = (2 * mu_xy + C1) / (mu_xx + mu_yy + C1)
    cs = (2 * s_xy + C2) / (s_xx + s_yy + C2)
    return lum, cs


def _spatial_mean(m):
    return ad.mean(m, axis=(-3, -2, -1))


def ssim_value(pred, gt):
    """Mean SSIM over the batch; returns an array or tape value."""
    _check_pair(pred, gt)
    x, y = luma(pred), luma(gt)
    size = min(ad.data_of(x).shape[-3:-1])
    if size < WINDOW:
        raise ValueError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got min dimension {size}")
    lum, cs = _ssim_terms(x, y, gaussian_taps())
    return ad.mean(_spatial_mean(lum * cs))


def scale_weights(scales: int) -> tuple[float, ...]:
    if scales == len(MS_WEIGHTS):
        return MS_WEIGHTS
    w = MS_WEIGHTS[:scales]
    total = sum(w)
    return tuple(v / total for v in w)


def ms_ssim_value(pred, gt, scales: int = 5):
    """Mean MS-SSIM over the batch; returns an array or tape value.

    Per-scale contrast-structure terms (and luminance at the coarsest
    scale) are clipped at zero before exponentiation. For fewer than five
    scales the leading weights are renormalised to sum to one.
    """
    _check_pair(pred, gt)
    if not 1 <= scales <= len(MS_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MS_WEIGHTS)}")
    x, y = luma(pred), luma(gt)
    size = min(ad.data_of(x).shape[-3:-1])
    if size < min_size(scales):
        raise ValueError(
            f"MS-SSIM with {scales} scales needs a minimum image dimension of {min_size(scales)}, got {size}"
        )
    taps = gaussian_taps()
    weights = scale_weights(scales)
    result = None
    for m in range(scales):
        lum, cs = _ssim_terms(x, y, taps)
        if m < scales - 1:
            term = _spatial_mean(cs)
            x, y = ad.avg_pool2(x), ad.avg_pool2(y)
        else:
            term = _spatial_mean(lum * cs)
        term = ad.power(ad.relu(term), weights[m])
        result = term if result is None else result * term
    return ad.mean(result)


def max_scales(h: int, w: int) -> int:
    """Largest number of MS-SSIM scales (<= 5) an h x w image supports, 0 if none."""
    n = 0
    while n < len(MS_WEIGHTS) and min(h, w) >= min_size(n + 1):
        n += 1
    return n


def ssim(pred, gt) -> float:
    return float(ssim_value(np.asarray(pred), np.asarray(gt)))


def ms_ssim(pred, gt, scales: int = 5) -> float:
    return float(ms_ssim_value(np.asarray(pred), np.asarray(gt), scales))


def psnr(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gt_mean_rescale(pred, gt) -> tuple[np.ndarray, float]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_pair(pred, gt)
    pred_mean = float(np.mean(luma(pred.astype(np.float64))))
    if pred_mean <= 0:
        raise ValueError("GT-Mean rescaling needs a prediction with positive mean gray level")
    q = float(np.mean(luma(gt.astype(np.float64)))) / pred_mean
    return np.clip(q * pred, 0.0, 1.0).astype(pred.dtype, copy=False), q


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    msssim: float
    gt_mean_applied: bool = False
    q: float | None = None


def evaluate(pred, gt, gt_mean: bool = False, scales: int = 5) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    q = None
    if gt_mean:
        pred, q = gt_mean_rescale(pred, gt)
    return MetricReport(psnr(pred, gt), ssim(pred, gt), ms_ssim(pred, gt, scales), gt_mean, q)
