"""Image-quality metrics: PSNR and SSIM on [0, 1] float images."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 * log10(1 / MSE) over the full image pair, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter2_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D image with a 1D window."""
    k = w.size
    v = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(v, k, axis=1) @ w


def ssim(pred: np.ndarray, gt: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         win_size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
    averaged over channels; windows fully inside the image only."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"ssim: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    if pred.shape[0] < win_size or pred.shape[1] < win_size:
        raise ValueError(f"ssim: image smaller than the {win_size}x{win_size} window")
    w = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for c in range(pred.shape[2]):
        a, b = pred[..., c], gt[..., c]
        mu_a = _filter2_valid(a, w)
        mu_b = _filter2_valid(b, w)
        var_a = _filter2_valid(a * a, w) - mu_a ** 2
        var_b = _filter2_valid(b * b, w) - mu_b ** 2
        cov = _filter2_valid(a * b, w) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
