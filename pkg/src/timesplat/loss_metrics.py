"""Training losses and evaluation metrics, all with exact analytic gradients.

Internals run in float64; gradients are returned in float64 regardless of
the image dtype so downstream chains stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.01


@dataclass
class LossReport:
    total: float
    l1: float
    ssim_term: float  # 1 - SSIM
    vol: float
    image_grad: np.ndarray  # d total / d predicted image
    scale_grad: np.ndarray  # d total / d per-Gaussian scales


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"image shapes differ: {pred.shape} vs {gt.shape}")


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute difference over all pixels and channels."""
    _check_pair(pred, gt)
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(padded: np.ndarray, g: np.ndarray, pad: int) -> np.ndarray:
    out = correlate1d(padded, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad]


def _filter_adjoint(d_stat: np.ndarray, g: np.ndarray, pad: int) -> np.ndarray:
    buf = np.zeros((d_stat.shape[0] + 2 * pad, d_stat.shape[1] + 2 * pad))
    buf[pad:-pad, pad:-pad] = d_stat
    buf = correlate1d(buf, g, axis=0, mode="constant")
    buf = correlate1d(buf, g, axis=1, mode="constant")
    return buf


def ssim(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on reflect-padded images, then averaged. Returns
    the mean SSIM and its exact gradient with respect to `pred`.
    """
    _check_pair(pred, gt)
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    h, w, n_ch = pred.shape
    pad = SSIM_WINDOW // 2
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    fold_idx = np.pad(np.arange(h * w).reshape(h, w), pad, mode="reflect").ravel()

    total = 0.0
    grad = np.zeros((h, w, n_ch))
    n_map = h * w * n_ch
    for ch in range(n_ch):
        x = np.pad(pred[:, :, ch].astype(np.float64), pad, mode="reflect")
        y = np.pad(gt[:, :, ch].astype(np.float64), pad, mode="reflect")
        mu1 = _filter_valid(x, g, pad)
        mu2 = _filter_valid(y, g, pad)
        ex2 = _filter_valid(x * x, g, pad)
        ey2 = _filter_valid(y * y, g, pad)
        exy = _filter_valid(x * y, g, pad)
        s1 = ex2 - mu1**2
        s2 = ey2 - mu2**2
        s12 = exy - mu1 * mu2
        a1 = 2.0 * mu1 * mu2 + SSIM_C1
        a2 = 2.0 * s12 + SSIM_C2
        b1 = mu1**2 + mu2**2 + SSIM_C1
        b2 = s1 + s2 + SSIM_C2
        ssim_map = (a1 * a2) / (b1 * b2)
        total += ssim_map.sum()

        p = 1.0 / n_map  # d mean / d map
        d_a1 = p * a2 / (b1 * b2)
        d_a2 = p * a1 / (b1 * b2)
        d_b1 = -p * ssim_map / b1
        d_b2 = -p * ssim_map / b2
        d_s1 = d_b2
        d_s12 = 2.0 * d_a2
        d_mu1 = 2.0 * mu2 * d_a1 + 2.0 * mu1 * d_b1 - 2.0 * mu1 * d_s1 - mu2 * d_s12
        d_x = (
            _filter_adjoint(d_mu1, g, pad)
            + 2.0 * x * _filter_adjoint(d_s1, g, pad)
            + y * _filter_adjoint(d_s12, g, pad)
        )
        folded = np.zeros(h * w)
        np.add.at(folded, fold_idx, d_x.ravel())
        grad[:, :, ch] = folded.reshape(h, w)

    return total / n_map, grad


def volume_regularizer(scales: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over Gaussians of the product of per-axis scales."""
    s = scales.astype(np.float64)
    if s.size == 0:
        return 0.0, np.zeros_like(s)
    value = float((s[:, 0] * s[:, 1] * s[:, 2]).sum())
    grad = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=1)
    return value, grad


def total_loss(
    pred: np.ndarray, gt: np.ndarray, scales: np.ndarray, weights: LossWeights
) -> LossReport:
    """L1 + lambda_ssim * (1 - SSIM) + lambda_vol * volume penalty."""
    l1_val, l1_grad = l1_loss(pred, gt)
    ssim_val, ssim_grad = ssim(pred, gt)
    vol_val, vol_grad = volume_regularizer(scales)
    ssim_term = 1.0 - ssim_val
    total = l1_val + weights.lambda_ssim * ssim_term + weights.lambda_vol * vol_val
    image_grad = l1_grad - weights.lambda_ssim * ssim_grad
    scale_grad = weights.lambda_vol * vol_grad
    return LossReport(total, l1_val, ssim_term, vol_val, image_grad, scale_grad)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    _check_pair(pred, gt)
    mse = float(((pred.astype(np.float64) - gt.astype(np.float64)) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)
