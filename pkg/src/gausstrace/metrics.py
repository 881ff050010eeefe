"""Image quality metrics: PSNR, single-scale SSIM, and masked variants.

Wide field-of-view renders reveal scene regions no training camera ever
observed; the masked variants restrict both metrics to a circular region
around the principal point. A pixel belongs to the mask when its center
(half-integer coordinates) lies strictly inside the circle; for SSIM the
whole 11x11 window must lie inside.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate, minimum_filter

from .errors import InvalidParameterError
from .images import ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.data.shape != b.data.shape:
        raise InvalidParameterError(
            f"image dimensions differ: {a.data.shape} vs {b.data.shape}")


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """10 log10(1 / MSE) for [0, 1] images; +inf for identical inputs."""
    _check_pair(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel SSIM over valid (fully interior) windows, (H-10, W-10, 3)."""
    win = _gaussian_window()
    half = (SSIM_WINDOW - 1) // 2
    maps = []
    for ch in range(3):
        x = a[:, :, ch]
        y = b[:, :, ch]
        crop = (slice(half, -half), slice(half, -half))
        mu_x = correlate(x, win, mode="constant")[crop]
        mu_y = correlate(y, win, mode="constant")[crop]
        xx = correlate(x * x, win, mode="constant")[crop] - mu_x * mu_x
        yy = correlate(y * y, win, mode="constant")[crop] - mu_y * mu_y
        xy = correlate(x * y, win, mode="constant")[crop] - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * xy + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
        maps.append(num / den)
    return np.stack(maps, axis=-1)


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean single-scale SSIM (11x11 gaussian window, sigma 1.5) over channels."""
    _check_pair(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WINDOW} pixels per side for SSIM")
    return float(np.mean(_ssim_map(a.data, b.data)))


def circular_mask(width: int, height: int, diameter_px: float) -> np.ndarray:
    """True where the pixel center lies strictly inside the centered circle."""
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    dx = cols[np.newaxis, :] - width / 2.0
    dy = rows[:, np.newaxis] - height / 2.0
    return dx * dx + dy * dy < (diameter_px / 2.0) ** 2


def masked_metric(a: ImageBuffer, b: ImageBuffer, mask_diameter_px: float,
                  metric: str = "psnr") -> float:
    """PSNR or SSIM restricted to the circular region around the image center."""
    _check_pair(a, b)
    mask = circular_mask(a.width, a.height, mask_diameter_px)
    if not mask.any():
        raise InvalidParameterError(
            f"mask diameter {mask_diameter_px} selects no pixel centers")
    if metric == "psnr":
        mse = float(np.mean((a.data[mask] - b.data[mask]) ** 2))
        return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)
    if metric == "ssim":
        if min(a.height, a.width) < SSIM_WINDOW:
            raise InvalidParameterError(
                f"images must be at least {SSIM_WINDOW} pixels per side for SSIM")
        half = (SSIM_WINDOW - 1) // 2
        interior = minimum_filter(mask.astype(np.uint8), size=SSIM_WINDOW,
                                  mode="constant", cval=0)
        window_ok = interior[half:-half, half:-half].astype(bool)
        if not window_ok.any():
            raise InvalidParameterError(
                f"mask diameter {mask_diameter_px} admits no full SSIM window")
        return float(np.mean(_ssim_map(a.data, b.data)[window_ok]))
    raise InvalidParameterError(f"unknown metric {metric!r}")
