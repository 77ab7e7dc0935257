"""
Multi-resolution frequency encoding of a 65x65 observed patch.

Four bands, low to high:
  L   65x65 DFT, max|z| <= 4         DC + 40 complex  -> 81 reals
  B2  central 33x33 DFT, 4 < max|z| <= 8   104 complex -> 208 reals
  B1  central 17x17 DFT, 4 < max|z| <= 8   104 complex -> 208 reals
  H   65x65 DFT, 4 < max|z| <= 8         104 complex -> 208 reals

Within a band coefficients follow the canonical half-plane order (one
member per conjugate pair), interleaved (re, im). L carries DC first.

Each band is then whitened (mean removal followed by ZCA rotation/scaling
with an eigenvalue floor) using statistics fitted on training inputs.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from src import config
from src.errors import InsufficientSamplesError, ShapeMismatchError
from src.fourier import band_indices, canonical_members

logger = logging.getLogger(__name__)

BAND_NAMES = ("L", "B2", "B1", "H")

# name -> (crop size, lo, hi)
_BAND_LAYOUT = {
    "L": (65, 0, 4),
    "B2": (33, 4, 8),
    "B1": (17, 4, 8),
    "H": (65, 4, 8),
}

_MIN_SAMPLES_PER_DIM = 10
_EIG_FLOOR_REL = 1e-5


# ---------------------------------------------------------------------------
# Data structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BandEncoding:
    """Per-band real vectors. Arrays may carry a leading batch axis."""

    L: np.ndarray
    B2: np.ndarray
    B1: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        for name in BAND_NAMES:
            arr = getattr(self, name)
            if arr.shape[-1] != band_dim(name):
                raise ShapeMismatchError(f"Band {name} needs {band_dim(name)} values, got {arr.shape[-1]}")

    def band(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BAND_NAMES}

    @property
    def batch_size(self) -> int | None:
        return self.L.shape[0] if self.L.ndim == 2 else None


@dataclass(frozen=True, eq=False)
class BandWhitening:
    mean: np.ndarray
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class WhiteningTransform:
    """Per-band affine maps e -> matrix @ (e - mean)."""

    bands: dict[str, BandWhitening]

    @classmethod
    def identity(cls) -> "WhiteningTransform":
        return cls({name: BandWhitening(np.zeros(band_dim(name)), np.eye(band_dim(name))) for name in BAND_NAMES})

    def __getitem__(self, name: str) -> BandWhitening:
        return self.bands[name]


# ---------------------------------------------------------------------------
# Index tables
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _band_table(name: str) -> tuple[int, int, np.ndarray, bool]:
    """(crop size, crop offset, flat uncentred indices, has_dc) for a band."""
    size, lo, hi = _BAND_LAYOUT[name]
    zs = canonical_members(band_indices(size, lo, hi))
    flat = (zs[:, 0] % size) * size + (zs[:, 1] % size)
    flat.setflags(write=False)
    offset = (config.PATCH_SIZE - size) // 2
    return size, offset, flat, lo == 0


def band_dim(name: str) -> int:
    _, _, flat, has_dc = _band_table(name)
    return 2 * len(flat) + (1 if has_dc else 0)


def total_dim() -> int:
    return sum(band_dim(name) for name in BAND_NAMES)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _interleave(coeffs: np.ndarray) -> np.ndarray:
    out = np.empty(coeffs.shape[:-1] + (2 * coeffs.shape[-1],))
    out[..., 0::2] = coeffs.real
    out[..., 1::2] = coeffs.imag
    return out


def encode_raw(patch: np.ndarray) -> BandEncoding:
    """
    Encode a 65x65 patch, or a (B, 65, 65) stack, into its four bands.
    """
    patch = np.asarray(patch, dtype=np.float64)
    n = config.PATCH_SIZE
    if patch.shape[-2:] != (n, n) or patch.ndim not in (2, 3):
        raise ShapeMismatchError(f"encode_raw expects {n}x{n} patches, got {patch.shape}")

    lead = patch.shape[:-2]
    spectra = {}
    bands = {}
    for name in BAND_NAMES:
        size, offset, flat, has_dc = _band_table(name)
        if size not in spectra:
            crop = patch[..., offset:offset + size, offset:offset + size]
            spectra[size] = np.fft.fft2(crop).reshape(lead + (size * size,))
        coeffs = spectra[size][..., flat]
        vec = _interleave(coeffs)
        if has_dc:
            vec = np.concatenate([spectra[size][..., :1].real, vec], axis=-1)
        bands[name] = vec
    return BandEncoding(**bands)


# ---------------------------------------------------------------------------
# Whitening
# ---------------------------------------------------------------------------

def _fit_band(samples: np.ndarray, name: str) -> BandWhitening:
    n, dim = samples.shape
    if n < _MIN_SAMPLES_PER_DIM * dim:
        raise InsufficientSamplesError(
            f"Band {name}: {n} samples is fewer than {_MIN_SAMPLES_PER_DIM} x dim ({dim})"
        )
    mean = samples.mean(axis=0)
    centred = samples - mean
    cov = centred.T @ centred / n
    evals, evecs = np.linalg.eigh(cov)
    floor = max(_EIG_FLOOR_REL * float(np.trace(cov)) / dim, 1e-12)
    n_floored = int(np.sum(evals < floor))
    if n_floored:
        logger.debug("Band %s: eigenvalue floor %.3e applied to %d/%d directions", name, floor, n_floored, dim)
    scale = 1.0 / np.sqrt(np.maximum(evals, floor))
    matrix = (evecs * scale) @ evecs.T
    return BandWhitening(mean=mean, matrix=matrix)


def fit_whitening(samples: BandEncoding) -> WhiteningTransform:
    """
    Fit per-band whitening on a batched encoding (leading axis = sample).
    Needs at least 10 samples per band dimension.
    """
    if samples.batch_size is None:
        raise InsufficientSamplesError("fit_whitening needs a batch of encodings, got a single one")
    bands = {name: _fit_band(samples.band(name), name) for name in BAND_NAMES}
    logger.info("Fitted whitening on %d samples (%d dims)", samples.batch_size, total_dim())
    return WhiteningTransform(bands)


def apply_whitening(t: WhiteningTransform, e: BandEncoding) -> BandEncoding:
    out = {}
    for name in BAND_NAMES:
        w = t[name]
        vec = e.band(name)
        if vec.shape[-1] != w.dim:
            raise ShapeMismatchError(f"Band {name}: encoding has {vec.shape[-1]} values, transform expects {w.dim}")
        out[name] = (vec - w.mean) @ w.matrix.T
    return BandEncoding(**out)


def invert_whitening(t: WhiteningTransform, e: BandEncoding) -> BandEncoding:
    """Undo apply_whitening by solving the per-band linear system."""
    out = {}
    for name in BAND_NAMES:
        w = t[name]
        vec = e.band(name)
        solved = np.linalg.solve(w.matrix, np.atleast_2d(vec).T).T
        out[name] = solved.reshape(vec.shape) + w.mean
    return BandEncoding(**out)


def encode(t: WhiteningTransform, patch: np.ndarray) -> BandEncoding:
    """encode_raw followed by apply_whitening."""
    return apply_whitening(t, encode_raw(patch))
