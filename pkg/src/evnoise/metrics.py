"""PSNR and SSIM between images of the same size and unit."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .events import IntensityImage

K1 = 0.01
K2 = 0.03
WIN = 11
SIGMA = 1.5


def _pair(a, b):
    if isinstance(a, IntensityImage) and isinstance(b, IntensityImage):
        if a.unit != b.unit:
            raise ValueError("images have different units")
        rng = float(max(a.maxval, b.maxval))
        a, b = a.values, b.values
    else:
        rng = None
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b, rng


def psnr(a, b, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images.

    The peak defaults to the images' ``maxval`` (255 for 8-bit).
    """
    a, b, rng = _pair(a, b)
    peak = data_range or rng or 255.0
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss_kernel():
    r = WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * SIGMA * SIGMA))
    return k / k.sum()


def _filter_valid(img, k):
    """Separable correlation keeping only fully-supported output pixels."""
    r = len(k) // 2
    out = correlate1d(correlate1d(img, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Window statistics are population (biased) moments; the mean runs over
    positions where the window fits entirely inside the image.
    """
    a, b, rng = _pair(a, b)
    if min(a.shape) < WIN:
        raise ValueError(f"images must be at least {WIN}x{WIN}")
    peak = data_range or rng or 255.0
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    k = _gauss_kernel()
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a * mu_a
    sbb = _filter_valid(b * b, k) - mu_b * mu_b
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
