"""Brute-force reference implementations and synthetic data used across the suite."""

import numpy as np
from scipy import ndimage


def naive_dft(x: np.ndarray) -> np.ndarray:
    """Centred direct double-sum DFT."""
    n = x.shape[0]
    c = (n - 1) // 2
    out = np.zeros((n, n), dtype=np.complex128)
    for z1 in range(-c, c + 1):
        for z2 in range(-c, c + 1):
            out[z1 + c, z2 + c] = naive_coeff(x, z1, z2)
    return out


def naive_coeff(x: np.ndarray, z1: int, z2: int) -> complex:
    n = x.shape[0]
    idx = np.arange(n)
    phase = np.exp(-2j * np.pi * (z1 * idx[:, None] + z2 * idx[None, :]) / n)
    return complex(np.sum(x * phase))


def natural_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """
    Piecewise-smooth test image: a few random rectangles and discs over a
    smoothed noise background, in [0, 1].
    """
    img = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3.0)
    img = (img - img.min()) / (np.ptp(img) + 1e-12) * 0.4 + 0.2
    yy, xx = np.mgrid[:size, :size]
    for _ in range(6):
        r0, c0 = rng.integers(0, size, 2)
        h, w = rng.integers(size // 8, size // 3, 2)
        img[r0:r0 + h, c0:c0 + w] = rng.uniform(0.0, 1.0)
    for _ in range(3):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(size / 12, size / 5)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2] = rng.uniform(0.0, 1.0)
    img = ndimage.gaussian_filter(img, 0.7)
    return np.clip(img, 0.0, 1.0)


def random_kernel(rng: np.random.Generator, size: int = 11, taps: int = 12) -> np.ndarray:
    """Sparse random-walk kernel on a size x size canvas, unit sum."""
    k = np.zeros((size, size))
    r = c = size // 2
    for _ in range(taps):
        k[r, c] += rng.uniform(0.5, 1.0)
        r = int(np.clip(r + rng.integers(-1, 2), 1, size - 2))
        c = int(np.clip(c + rng.integers(-1, 2), 1, size - 2))
    return k / k.sum()
