"""PSNR and SSIM on float images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_chw(image) -> np.ndarray:
    a = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("metrics take a single image (batch size 1)")
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected an image of shape (c, h, w), got {a.shape}")
    return a


def to_luma(image) -> np.ndarray:
    """ITU-R BT.601 luma in [0, 1] (16-235 studio swing scaled by 1/255)."""
    a = _as_chw(image)
    if a.shape[0] != 3:
        raise ValueError("luma conversion needs 3 channels")
    y = (65.481 * a[0] + 128.553 * a[1] + 24.966 * a[2] + 16.0) / 255.0
    return y[None]


def psnr(a, b, y_channel: bool = False) -> float:
    """10 log10(1 / MSE) over all pixels and channels; ``inf`` for identical images."""
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    if y_channel:
        x, y = to_luma(x), to_luma(y)
    mse = float(np.mean(np.square(x - y)))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable, no padding: output shrinks by len(g) - 1 per axis
    a = sliding_window_view(a, g.size, axis=-1) @ g
    return sliding_window_view(a, g.size, axis=-2) @ g


def ssim_map(a, b) -> np.ndarray:
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[1]}x{x.shape[2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a, b, y_channel: bool = False) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    if y_channel:
        a, b = to_luma(a), to_luma(b)
    return float(np.mean(ssim_map(a, b)))
