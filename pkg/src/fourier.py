"""
2-D DFTs on odd-sized grids, frequency indexing and half-plane packing.

Conventions (every other module relies on them):
  - Forward transform is unnormalised, X[z] = sum_n x[n] exp(-2*pi*i z.n / N);
    the inverse carries the 1/N^2 factor.
  - Pixel n = (n1, n2) is (row, column) with origin at index (0, 0).
  - Frequencies z = (z1, z2), z_i in [-(N-1)/2, (N-1)/2]. A `Spectrum`
    stores its coefficients on a centred grid: coeffs[z1 + c, z2 + c] with
    c = (N-1)/2.
  - Canonical half plane: z is included iff z1 > 0, or z1 == 0 and z2 > 0;
    included indices are ordered row-major over (z1, z2). Together with the
    DC term it determines a conjugate-symmetric spectrum.

Batched helpers (leading axes are batch axes) work on the *uncentred* numpy
layout, where frequency z lives at index z mod N. They back the network's
hot path; the dataclass API wraps them for single patches.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from src.errors import ShapeMismatchError, SymmetryError

logger = logging.getLogger(__name__)

_SYMMETRY_RTOL = 1e-9


# ---------------------------------------------------------------------------
# Data structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Spectrum:
    """Full N x N complex DFT grid, stored centred (see module docstring)."""

    size: int
    coeffs: np.ndarray
    real_origin: bool = True

    def __post_init__(self):
        if self.coeffs.shape != (self.size, self.size):
            raise ShapeMismatchError(f"Spectrum of size {self.size} needs a square grid, got {self.coeffs.shape}")

    @property
    def half_size(self) -> int:
        return (self.size - 1) // 2

    def coeff(self, z1: int, z2: int) -> complex:
        c = self.half_size
        return complex(self.coeffs[z1 + c, z2 + c])


@dataclass(frozen=True, eq=False)
class PackedSpectrum:
    """DC term plus the canonical half plane of a conjugate-symmetric spectrum."""

    size: int
    dc: float
    half: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.half.shape[-1] != half_length(self.size):
            raise ShapeMismatchError(
                f"Packed spectrum of size {self.size} needs {half_length(self.size)} coefficients, "
                f"got {self.half.shape[-1]}"
            )


# ---------------------------------------------------------------------------
# Index bookkeeping
# ---------------------------------------------------------------------------

def _check_odd(n: int) -> None:
    if n < 1 or n % 2 == 0:
        raise ShapeMismatchError(f"Only odd DFT sizes are supported, got {n}")


def half_length(n: int) -> int:
    """Number of unique complex coefficients besides DC: (N^2 - 1) / 2."""
    return (n * n - 1) // 2


@lru_cache(maxsize=None)
def half_plane_indices(n: int) -> np.ndarray:
    """
    Canonical half-plane frequencies as an (M, 2) int array of (z1, z2),
    row-major. Cached arrays are read-only.
    """
    _check_odd(n)
    c = (n - 1) // 2
    zs = [(0, z2) for z2 in range(1, c + 1)]
    zs += [(z1, z2) for z1 in range(1, c + 1) for z2 in range(-c, c + 1)]
    out = np.array(zs, dtype=np.int64).reshape(-1, 2)
    out.setflags(write=False)
    return out


def is_canonical(z1: int, z2: int) -> bool:
    return z1 > 0 or (z1 == 0 and z2 > 0)


def band_indices(n: int, lo: int, hi: int) -> np.ndarray:
    """
    Frequencies with lo < max(|z1|, |z2|) <= hi, as an (M, 2) int array in
    row-major order. lo == 0 includes the DC term as well.
    """
    _check_odd(n)
    c = (n - 1) // 2
    if not 0 <= lo < hi <= c:
        raise ValueError(f"Band bounds must satisfy 0 <= lo < hi <= {c}, got lo={lo}, hi={hi}")
    out = []
    for z1 in range(-hi, hi + 1):
        for z2 in range(-hi, hi + 1):
            m = max(abs(z1), abs(z2))
            if lo < m <= hi or (lo == 0 and m == 0):
                out.append((z1, z2))
    return np.array(out, dtype=np.int64)


def canonical_members(zs: np.ndarray) -> np.ndarray:
    """Keep one member of each conjugate pair (the canonical one), DC dropped."""
    keep = (zs[:, 0] > 0) | ((zs[:, 0] == 0) & (zs[:, 1] > 0))
    return zs[keep]


@lru_cache(maxsize=None)
def _half_plane_flat(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat (uncentred) indices of the half plane and of its conjugate mirror."""
    zs = half_plane_indices(n)
    pos = (zs[:, 0] % n) * n + (zs[:, 1] % n)
    neg = ((-zs[:, 0]) % n) * n + ((-zs[:, 1]) % n)
    pos.setflags(write=False)
    neg.setflags(write=False)
    return pos, neg


# ---------------------------------------------------------------------------
# Batched array helpers (uncentred layout)
# ---------------------------------------------------------------------------

def hermitian_project(grid: np.ndarray) -> np.ndarray:
    """
    Make an uncentred spectrum exactly conjugate-symmetric by averaging each
    coefficient with the conjugate of its mirror. For a real-signal FFT this
    only removes rounding noise, and the result is bit-exactly symmetric.
    """
    mirror = np.roll(np.flip(grid, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))
    return (grid + np.conj(mirror)) / 2


def fft_real(x: np.ndarray) -> np.ndarray:
    """Unnormalised DFT over the last two axes, exactly Hermitian."""
    return hermitian_project(np.fft.fft2(x))


def ifft_real(X: np.ndarray) -> np.ndarray:
    """Inverse DFT over the last two axes, real part (imaginary residue dropped)."""
    return np.fft.ifft2(X).real


def pack_grid(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(dc, half) from an uncentred (..., N, N) spectrum; no symmetry check."""
    n = grid.shape[-1]
    pos, _ = _half_plane_flat(n)
    flat = grid.reshape(grid.shape[:-2] + (n * n,))
    return flat[..., 0].real, flat[..., pos]


def unpack_grid(dc: np.ndarray | float, half: np.ndarray, n: int) -> np.ndarray:
    """Rebuild an uncentred (..., N, N) spectrum from (dc, half)."""
    pos, neg = _half_plane_flat(n)
    lead = half.shape[:-1]
    flat = np.zeros(lead + (n * n,), dtype=np.complex128)
    flat[..., pos] = half
    flat[..., neg] = np.conj(half)
    flat[..., 0] = dc
    return flat.reshape(lead + (n, n))


# ---------------------------------------------------------------------------
# Public single-patch API
# ---------------------------------------------------------------------------

def dft2(patch: np.ndarray) -> Spectrum:
    """Unnormalised forward DFT of a real odd-sized square patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ShapeMismatchError(f"dft2 expects a square patch, got {patch.shape}")
    _check_odd(patch.shape[0])
    grid = np.fft.fftshift(fft_real(patch))
    return Spectrum(size=patch.shape[0], coeffs=grid, real_origin=True)


def idft2(s: Spectrum) -> np.ndarray:
    """Inverse DFT (1/N^2 normalised); returns the real part."""
    return ifft_real(np.fft.ifftshift(s.coeffs))


def pack(s: Spectrum) -> PackedSpectrum:
    """Reduce a conjugate-symmetric spectrum to (dc, half plane)."""
    grid = np.fft.ifftshift(s.coeffs)
    mirror = np.roll(np.flip(grid), shift=(1, 1), axis=(0, 1))
    scale = max(1.0, float(np.max(np.abs(grid))))
    err = float(np.max(np.abs(grid - np.conj(mirror))))
    if err > _SYMMETRY_RTOL * scale:
        raise SymmetryError(f"Spectrum is not conjugate-symmetric (max deviation {err:.3e})")
    dc, half = pack_grid(grid)
    return PackedSpectrum(size=s.size, dc=float(dc), half=half.copy())


def unpack(p: PackedSpectrum) -> Spectrum:
    """Rebuild the full grid by conjugate reflection."""
    grid = unpack_grid(p.dc, p.half, p.size)
    return Spectrum(size=p.size, coeffs=np.fft.fftshift(grid), real_origin=True)


# ---------------------------------------------------------------------------
# Kernel / signal spectra
# ---------------------------------------------------------------------------

def kernel_otf(taps: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """
    Uncentred transfer function of a filter on a grid of `shape`: the filter
    is zero-padded and rolled so its centre tap sits at the origin.
    """
    kr, kc = taps.shape
    if kr > shape[0] or kc > shape[1]:
        raise ShapeMismatchError(f"Filter {taps.shape} does not fit in a {shape} grid")
    canvas = np.zeros(shape)
    canvas[:kr, :kc] = taps
    canvas = np.roll(canvas, shift=(-(kr // 2), -(kc // 2)), axis=(0, 1))
    return np.fft.fft2(canvas)


def kernel_spectrum(taps: np.ndarray, n: int) -> Spectrum:
    """Centred N x N spectrum K[z] of a kernel (centre tap at the origin)."""
    _check_odd(n)
    grid = hermitian_project(kernel_otf(np.asarray(taps, dtype=np.float64), (n, n)))
    return Spectrum(size=n, coeffs=np.fft.fftshift(grid), real_origin=True)


def spectral_profile(patch: np.ndarray) -> np.ndarray:
    """Per-pixel power spectrum |X[z]|^2 / N^2 of a patch, centred."""
    s = dft2(patch)
    return np.abs(s.coeffs) ** 2 / (s.size * s.size)


def circular_shift_phase(n: int, shift: tuple[int, int]) -> Spectrum:
    """Filter whose application circularly shifts a patch by `shift` pixels."""
    _check_odd(n)
    c = (n - 1) // 2
    z = np.arange(-c, c + 1)
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    ramp = np.exp(-2j * np.pi * (z1 * shift[0] + z2 * shift[1]) / n)
    grid = hermitian_project(np.fft.ifftshift(ramp))
    return Spectrum(size=n, coeffs=np.fft.fftshift(grid), real_origin=True)
