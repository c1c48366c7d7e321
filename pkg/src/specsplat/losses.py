"""Reconstruction losses, the weighted dual objective, and image metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import ContractError, LossMode, TrainConfig

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0


def _window(dtype=np.float64) -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return (g / g.sum()).astype(dtype)


def _blur(img: np.ndarray) -> np.ndarray:
    # zero-padded "same" window sums over the two spatial axes
    w = _window(img.dtype)
    return correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img))


def _check_pair(pred, gt):
    pred, gt = _as_array(pred), _as_array(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    return pred, gt


def _ssim_terms(x, y, data_range=1.0):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _blur(x), _blur(y)
    e_xx, e_yy, e_xy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * (e_xy - mu_x * mu_y) + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = (e_xx - mu_x * mu_x) + (e_yy - mu_y * mu_y) + c2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_map(pred, gt, data_range: float = 1.0) -> np.ndarray:
    x, y = _check_pair(pred, gt)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y, data_range)
    return a1 * a2 / (b1 * b2)


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM, computed per channel with an 11x11 Gaussian window (sigma 1.5)."""
    return float(ssim_map(pred, gt, data_range).mean(dtype=np.float64))


def ssim_and_grad(pred, gt, data_range: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean SSIM and its exact gradient w.r.t. ``pred``."""
    shape = _as_array(pred).shape
    x, y = _check_pair(pred, gt)
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y, data_range)
    den = b1 * b2
    s = a1 * a2 / den
    scale = 1.0 / s.size
    # partials of the map w.r.t. mu_x, E[x^2] and E[xy]
    d_mu = (2 * mu_y * a2 - 2 * mu_y * a1) / den - s * (2 * mu_x / b1 - 2 * mu_x / b2)
    d_exx = -s / b2
    d_exy = 2 * a1 / den
    grad = _blur(d_mu) + 2 * x * _blur(d_exx) + y * _blur(d_exy)
    return float(s.mean(dtype=np.float64)), (grad * scale).reshape(shape)


def mse(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    d = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.mean(d * d))


def psnr(pred, gt, peak: float = 1.0) -> float:
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(pred, gt)
    if err < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / err)


def psnr_per_channel(pred, gt, peak: float = 1.0) -> list[float]:
    pred, gt = _check_pair(pred, gt)
    return [psnr(pred[..., c], gt[..., c], peak) for c in range(pred.shape[-1])]


def image_loss(pred, gt, dssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - w) * L1 + w * (1 - SSIM) / 2`` and its gradient w.r.t. ``pred``."""
    shape = _as_array(pred).shape
    x, y = _check_pair(pred, gt)
    diff = x - y
    l1 = float(np.abs(diff).mean(dtype=np.float64))
    grad = np.sign(diff) * ((1 - dssim_weight) / diff.size)
    value = (1 - dssim_weight) * l1
    if dssim_weight:
        s, g_s = ssim_and_grad(x, y)
        value += dssim_weight * (1 - s) / 2
        grad = grad - (dssim_weight / 2) * g_s
    return value, grad.astype(x.dtype).reshape(shape)


@dataclass
class LossBreakdown:
    l_ms: float
    l_rgb: float
    l_total: float
    lambda_ms: float
    lambda_rgb: float

    def as_dict(self) -> dict:
        return {"l_ms": self.l_ms, "l_rgb": self.l_rgb, "l_total": self.l_total}


def loss_weights(config: TrainConfig) -> tuple[float, float]:
    """Effective (lambda_ms, lambda_rgb) after applying the loss mode."""
    mode = config.loss_mode
    return (config.lambda_ms if mode in (LossMode.MS, LossMode.DUAL) else 0.0,
            config.lambda_rgb if mode in (LossMode.RGB, LossMode.DUAL) else 0.0)


def dual_loss(pred_ms, gt_ms, pred_rgb, gt_rgb, config: TrainConfig):
    """Weighted sum of the spectral and RGB image losses.

    Returns ``(LossBreakdown, grad_ms, grad_rgb)``; an inactive branch has
    loss 0 and gradient ``None``.
    """
    mode = config.loss_mode
    if mode is LossMode.DUAL and config.lambda_ms + config.lambda_rgb <= 0:
        raise ContractError("lambda_ms + lambda_rgb must be positive for dual loss")
    lam_ms, lam_rgb = loss_weights(config)
    use_ms = mode in (LossMode.MS, LossMode.DUAL)
    use_rgb = mode in (LossMode.RGB, LossMode.DUAL)
    if use_ms and (pred_ms is None or gt_ms is None):
        raise ContractError(f"loss mode {mode.value} needs a spectral prediction and ground truth")
    if use_rgb and (pred_rgb is None or gt_rgb is None):
        raise ContractError(f"loss mode {mode.value} needs an RGB prediction and ground truth")
    l_ms = l_rgb = 0.0
    g_ms = g_rgb = None
    if use_ms:
        l_ms, g_ms = image_loss(pred_ms, gt_ms, config.dssim_weight)
        g_ms = g_ms * lam_ms
    if use_rgb:
        l_rgb, g_rgb = image_loss(pred_rgb, gt_rgb, config.dssim_weight)
        g_rgb = g_rgb * lam_rgb
    total = lam_ms * l_ms + lam_rgb * l_rgb
    return LossBreakdown(l_ms, l_rgb, total, lam_ms, lam_rgb), g_ms, g_rgb
