"""Clean-image ingestion and patch sampling for training.

Also provides a deterministic synthetic gallery of piecewise-smooth images
(shapes over gradients plus band-limited texture) used by the smoke-scale
training runs, which ship without an external dataset.
"""

from __future__ import annotations

import numpy as np

from .imageio import list_images, load_image


def synthetic_image(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    img = rng.uniform(0.1, 0.9) + rng.uniform(-0.4, 0.4) * xx + rng.uniform(-0.4, 0.4) * yy
    for _ in range(int(rng.integers(4, 9))):
        kind = rng.integers(0, 3)
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        val = rng.uniform(0.0, 1.0)
        if kind == 0:  # ellipse
            rx, ry = rng.uniform(0.05, 0.3, size=2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            img[mask] = val
        elif kind == 1:  # rectangle
            w, h = rng.uniform(0.05, 0.35, size=2)
            mask = (np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= h)
            img[mask] = val
        else:  # band-limited stripes inside an ellipse
            rx, ry = rng.uniform(0.1, 0.35, size=2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            freq = rng.uniform(3.0, 9.0)
            phase = rng.uniform(0, 2 * np.pi)
            ang = rng.uniform(0, np.pi)
            wave = 0.5 + 0.5 * np.sin(
                2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase
            )
            img[mask] = 0.3 * val + 0.7 * wave[mask]
    return np.clip(img, 0.0, 1.0)


def synthetic_gallery(count, size, seed):
    rng = np.random.default_rng(seed)
    return [synthetic_image(size, rng) for _ in range(count)]


def load_image_dir(directory):
    return [load_image(p) for p in list_images(directory)]


def sample_patch_batch(images, patch, batch, rng):
    """Uniformly sample (batch, patch, patch) clean patches."""
    out = np.empty((batch, patch, patch), dtype=np.float64)
    for b in range(batch):
        img = images[int(rng.integers(len(images)))]
        h, w = img.shape
        if h < patch or w < patch:
            raise ValueError(f"image {h}x{w} smaller than patch {patch}")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        out[b] = img[y : y + patch, x : x + patch]
    return out
