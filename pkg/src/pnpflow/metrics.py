"""Image-quality metrics on [-1, 1] data."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .domain import ShapeError

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 2.0) -> float:
    """PSNR in dB; ``peak = 2`` is the dynamic range of [-1, 1] data.

    Capped at 100 dB when the MSE is below ``peak^2 * 1e-10``.
    """
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(a, b)
    if err < peak**2 * 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak**2 / err))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", patches, window)


def ssim(a, b, data_range: float = 2.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows.

    ``(H, W)`` grids are scored directly; ``(C, H, W)`` grids are averaged
    over channels.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], data_range, win_size, sigma, k1, k2)
                              for c in range(a.shape[0])]))
    if a.ndim != 2:
        raise ShapeError("ssim expects (H, W) or (C, H, W) grids")
    if min(a.shape) < win_size:
        raise ShapeError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    w = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _local_mean(a, w)
    mu_b = _local_mean(b, w)
    var_a = _local_mean(a * a, w) - mu_a * mu_a
    var_b = _local_mean(b * b, w) - mu_b * mu_b
    cov = _local_mean(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
