"""Image quality metrics and synthetic noise.

Images are [0,1]-scaled float arrays; noise levels are quoted on the 0-255
scale as is conventional for Gaussian denoising benchmarks.
"""

from __future__ import annotations

import math

import numpy as np


def add_awgn(image, sigma, seed=None, rng=None):
    """Add i.i.d. Gaussian noise with std sigma/255; unclipped float output."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    if rng is None:
        rng = np.random.default_rng(seed)
    noise = rng.standard_normal(image.shape) * (sigma / 255.0)
    return image + noise.astype(image.dtype, copy=False)


def psnr(a, b):
    """10*log10(1/MSE) on [0,1]-scaled images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _valid_windows(x, size):
    view = np.lib.stride_tricks.sliding_window_view(x, (size, size))
    return view  # (H-size+1, W-size+1, size, size)


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Mean local SSIM with a Gaussian window over valid positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(
            f"image {a.shape} too small for the {window}x{window} SSIM window"
        )
    w = _gaussian_window(window, sigma)
    wa = _valid_windows(a, window)
    wb = _valid_windows(b, window)
    mu_a = np.einsum("ijkl,kl->ij", wa, w)
    mu_b = np.einsum("ijkl,kl->ij", wb, w)
    aa = np.einsum("ijkl,kl->ij", wa * wa, w)
    bb = np.einsum("ijkl,kl->ij", wb * wb, w)
    ab = np.einsum("ijkl,kl->ij", wa * wb, w)
    var_a = aa - mu_a**2
    var_b = bb - mu_b**2
    cov = ab - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
