"""
Image and blur-kernel containers, file I/O, padding and spatial convolution.

Images are single-channel float64 arrays (row-major, shape height x width)
with intensities nominally in [0, 1]. Colour input is reduced to luminance
on load. Convolution here is the degradation model of the toolkit and the
reference the frequency-domain code is tested against.

File formats:
  - PGM (P5) 8/16-bit read, 16-bit write (lossless interchange format)
  - PNG read (grayscale, grayscale+alpha, RGB, RGBA, palette), 8-bit write
  - kernel text: first line "W H", then W*H whitespace-separated reals
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import signal

from src.errors import ImageFormatError, KernelError, ShapeMismatchError

logger = logging.getLogger(__name__)

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])

_KERNEL_SUM_TOL = 1e-9


# ---------------------------------------------------------------------------
# Data structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Image:
    """A single-channel image; `data` has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatchError(f"Image data must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Image data contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __repr__(self) -> str:
        return f"<Image {self.width}x{self.height}>"


@dataclass(frozen=True, eq=False)
class BlurKernel:
    """Non-negative, unit-sum blur kernel on an odd square canvas."""

    taps: np.ndarray

    def __post_init__(self):
        arr = np.array(self.taps, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] % 2 == 0:
            raise KernelError(f"Kernel canvas must be odd and square, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise KernelError("Kernel contains non-finite taps")
        if np.any(arr < 0):
            raise KernelError("Kernel taps must be non-negative")
        if abs(arr.sum() - 1.0) > _KERNEL_SUM_TOL:
            raise KernelError(f"Kernel taps must sum to 1 (got {arr.sum():.12f})")
        arr.setflags(write=False)
        object.__setattr__(self, "taps", arr)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BlurKernel":
        """
        Build a kernel from arbitrary non-negative data: negatives are
        clipped, the canvas is zero-padded to an odd square (content kept
        centred) and taps are normalised to unit sum.
        """
        a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, None)
        if a.ndim != 2 or a.size == 0:
            raise KernelError(f"Kernel data must be a non-empty 2-D array, got {a.shape}")
        total = a.sum()
        if not np.isfinite(total) or total <= 0:
            raise KernelError("Kernel has no positive mass")

        side = max(a.shape)
        if side % 2 == 0:
            side += 1
        pad_r = side - a.shape[0]
        pad_c = side - a.shape[1]
        a = np.pad(a, ((pad_r // 2, pad_r - pad_r // 2), (pad_c // 2, pad_c - pad_c // 2)))
        return cls(a / a.sum())

    @classmethod
    def delta(cls, size: int = 1) -> "BlurKernel":
        taps = np.zeros((size, size))
        taps[size // 2, size // 2] = 1.0
        return cls(taps)

    def padded(self, size: int) -> "BlurKernel":
        """The same kernel on a larger odd canvas, centre preserved."""
        if size < self.size or size % 2 == 0:
            raise KernelError(f"Cannot pad a {self.size}px kernel to {size}px")
        p = (size - self.size) // 2
        return BlurKernel(np.pad(self.taps, p))

    def __repr__(self) -> str:
        return f"<BlurKernel {self.size}x{self.size}>"


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------

def _read_pgm(path: str) -> np.ndarray:
    """Parse a binary (P5) PGM with 8- or 16-bit samples."""
    with open(path, "rb") as f:
        raw = f.read()

    # Header: magic, width, height, maxval separated by whitespace; '#' comments
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ImageFormatError(f"unreadable file: truncated PGM header in {path}")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"unreadable file: truncated PGM header in {path}")
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    # Exactly one whitespace byte separates the header from the raster
    pos += 1

    if tokens[0] != b"P5":
        raise ImageFormatError(f"unreadable file: {path} is not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ImageFormatError(f"unreadable file: malformed PGM header in {path}") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"unreadable file: invalid PGM size {width}x{height}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"unsupported bit depth: PGM maxval {maxval} in {path}")

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    needed = width * height * dtype.itemsize
    payload = raw[pos:pos + needed]
    if len(payload) < needed:
        raise ImageFormatError(f"unreadable file: truncated PGM raster in {path}")
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def _read_png(path: str) -> np.ndarray:
    """Decode a PNG via Pillow and reduce it to luminance in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            elif mode == "1":
                im = im.convert("L")
                mode = "L"
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"unreadable file: {path} ({exc})") from exc

    if mode == "L":
        return arr.astype(np.float64) / 255.0
    if mode == "LA":
        return arr[..., 0].astype(np.float64) / 255.0
    if mode in ("RGB", "RGBA"):
        return arr[..., :3].astype(np.float64) @ _LUMA / 255.0
    if mode.startswith("I;16"):
        return arr.astype(np.float64) / 65535.0
    if mode == "I":
        # Pillow widens 16-bit grayscale to 32-bit ints
        return arr.astype(np.float64) / 65535.0
    raise ImageFormatError(f"unsupported bit depth: PNG mode {mode!r} in {path}")


def load_image(path: str) -> Image:
    """Load a PGM or PNG file as a luminance Image with values in [0, 1]."""
    if not os.path.isfile(path):
        raise ImageFormatError(f"unreadable file: {path} does not exist")

    with open(path, "rb") as f:
        magic = f.read(8)

    if magic[:2] == b"P5":
        data = _read_pgm(path)
    elif magic.startswith(b"\x89PNG"):
        data = _read_png(path)
    else:
        raise ImageFormatError(f"unreadable file: {path} is neither PGM (P5) nor PNG")

    logger.debug("Loaded %s (%dx%d)", path, data.shape[1], data.shape[0])
    return Image(data)


def save_image(img: Image, path: str) -> None:
    """
    Write an image. `.png` targets get 8-bit PNG; everything else is written
    as 16-bit binary PGM. Values are clipped to [0, 1] before quantisation.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    clipped = np.clip(img.data, 0.0, 1.0)

    if path.lower().endswith(".png"):
        PILImage.fromarray(np.rint(clipped * 255.0).astype(np.uint8)).save(path)
    else:
        raster = np.rint(clipped * 65535.0).astype(">u2")
        with open(path, "wb") as f:
            f.write(f"P5\n{img.width} {img.height}\n65535\n".encode("ascii"))
            f.write(raster.tobytes())
    logger.debug("Saved %s (%dx%d)", path, img.width, img.height)


# ---------------------------------------------------------------------------
# Kernel I/O
# ---------------------------------------------------------------------------

def load_kernel(path: str) -> BlurKernel:
    """
    Load a kernel from the text format, or from a grayscale PGM/PNG (the form
    benchmark kernels are usually distributed in).
    """
    if not os.path.isfile(path):
        raise ImageFormatError(f"unreadable file: {path} does not exist")

    if path.lower().endswith((".pgm", ".png")):
        return BlurKernel.from_array(load_image(path).data)

    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split()
    try:
        width, height = int(tokens[0]), int(tokens[1])
        values = np.array([float(t) for t in tokens[2:]], dtype=np.float64)
    except (IndexError, ValueError):
        raise ImageFormatError(f"unreadable file: malformed kernel text in {path}") from None
    if values.size != width * height:
        raise ImageFormatError(
            f"unreadable file: kernel {path} declares {width}x{height} but holds {values.size} values"
        )
    taps = values.reshape(height, width)
    if np.any(taps < 0):
        raise KernelError(f"Kernel {path} has negative taps")
    if abs(taps.sum() - 1.0) > _KERNEL_SUM_TOL:
        logger.warning("Kernel %s sums to %.6f, renormalising", path, taps.sum())
    return BlurKernel.from_array(taps)


def save_kernel(k: BlurKernel, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{k.size} {k.size}\n")
        for row in k.taps:
            f.write(" ".join(repr(float(v)) for v in row))
            f.write("\n")


# ---------------------------------------------------------------------------
# Padding / convolution / noise
# ---------------------------------------------------------------------------

def reflect_pad(arr: np.ndarray, pad: int | tuple[int, int]) -> np.ndarray:
    """Symmetric (edge-repeating) reflection padding on both spatial axes."""
    pr, pc = (pad, pad) if isinstance(pad, int) else pad
    return np.pad(arr, ((pr, pr), (pc, pc)), mode="symmetric")


def convolve_array(arr: np.ndarray, taps: np.ndarray, mode: str = "valid") -> np.ndarray:
    """
    True 2-D convolution of an array with an arbitrary odd-sized filter.

    `valid` returns (H-s+1, W-s+1); `same-reflect` pads symmetrically by the
    filter radius first, so the output matches the input size.
    """
    s_r, s_c = taps.shape
    if mode == "valid":
        return signal.convolve(arr, taps, mode="valid")
    if mode == "same-reflect":
        padded = reflect_pad(arr, (s_r // 2, s_c // 2))
        return signal.convolve(padded, taps, mode="valid")
    raise ValueError(f"Unknown convolution mode {mode!r}")


def convolve(x: Image, k: BlurKernel, mode: str = "valid") -> Image:
    """Blur an image with a kernel (the x*k term of the observation model)."""
    if mode == "valid" and (x.height <= k.size or x.width <= k.size):
        raise ShapeMismatchError(
            f"Kernel ({k.size}px) must be smaller than the image ({x.width}x{x.height}) in valid mode"
        )
    return Image(convolve_array(x.data, k.taps, mode))


def add_gaussian_noise(x: Image, sigma: float, rng: np.random.Generator) -> Image:
    """Add i.i.d. N(0, sigma^2) noise. Output is not clipped."""
    if sigma < 0:
        raise ValueError(f"Noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return Image(x.data.copy())
    return Image(x.data + rng.normal(0.0, sigma, size=x.data.shape))
