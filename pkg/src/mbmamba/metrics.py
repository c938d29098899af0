"""PSNR and SSIM for images with dynamic range 1."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def capped(value: float, cap: float = PSNR_CAP) -> float:
    return min(value, cap)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over channels, 11x11 gaussian window (sigma 1.5), valid region only.

    Images smaller than the window fall back to a reflect-padded full map.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    win = _gaussian_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    half = win.shape[0] // 2
    vals = []
    for x, y in zip(a, b):
        f = lambda z: ndimage.correlate(z, win, mode="reflect")  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        if m.shape[0] > 2 * half and m.shape[1] > 2 * half:
            m = m[half:-half, half:-half]
        vals.append(m.mean())
    return float(np.mean(vals))
