"""
Whole-image restoration from per-patch network predictions.

The blurry image is reflect-padded by 32 px, cut into overlapping 65x65
patches, each patch is restored to its central 33x33 by the network's
predicted filter, and the restorations are blended with a 2-D Hann window.
The result is the neural-average estimate the kernel estimator starts from.
"""

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import windows

from src import config
from src.band_encoder import apply_whitening, encode_raw
from src.blind_filter_net import NetworkWeights, apply_half, forward_batch, outputs_to_half
from src.errors import ShapeMismatchError
from src.image_core import Image, reflect_pad

logger = logging.getLogger(__name__)

N = config.PATCH_SIZE
M = config.OUTPUT_SIZE
PAD = N // 2
_CROP = (N - M) // 2
MAX_STRIDE = 16


def hann_window() -> np.ndarray:
    """33x33 Hann taper, strictly positive (interior of a length-35 window)."""
    w = windows.hann(M + 2)[1:-1]
    return np.outer(w, w)


def patch_anchors(length: int, stride: int) -> np.ndarray:
    """Top-left patch positions along one padded axis, last one clamped to the edge."""
    last = length - N
    anchors = np.arange(0, last + 1, stride)
    if anchors[-1] != last:
        anchors = np.append(anchors, last)
    return anchors


def _restore_chunk(w: NetworkWeights, patches: np.ndarray) -> np.ndarray:
    e = apply_whitening(w.whitening, encode_raw(patches))
    cache = forward_batch(w, e)
    return apply_half(outputs_to_half(cache.out), patches)


def restore(
    y: Image,
    w: NetworkWeights,
    stride: int = config.STRIDE,
    threads: int = config.THREADS,
    chunk: int = config.INFERENCE_CHUNK,
) -> Image:
    """
    Neural-average estimate x_N of a blurry image. Patch chunks run in
    parallel; their outputs are accumulated in chunk order, so the result
    does not depend on the thread count.
    """
    if not 1 <= stride <= MAX_STRIDE:
        raise ValueError(f"stride must be in [1, {MAX_STRIDE}], got {stride}")
    if y.height < M or y.width < M:
        raise ShapeMismatchError(f"Image {y.width}x{y.height} is smaller than {M}x{M}")

    padded = reflect_pad(y.data, PAD)
    hp, wp = padded.shape
    rows = patch_anchors(hp, stride)
    cols = patch_anchors(wp, stride)
    anchors = [(r, c) for r in rows for c in cols]
    view = sliding_window_view(padded, (N, N))

    win = hann_window()
    num = np.zeros_like(padded)
    den = np.zeros_like(padded)

    chunks = [anchors[i:i + chunk] for i in range(0, len(anchors), chunk)]
    logger.info("Restoring %dx%d image: %d patches in %d chunks (stride %d)",
                y.width, y.height, len(anchors), len(chunks), stride)

    def run(batch):
        idx = np.array(batch)
        return _restore_chunk(w, view[idx[:, 0], idx[:, 1]])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for i, (batch, out) in enumerate(zip(chunks, pool.map(run, chunks)), start=1):
            for (r, c), patch in zip(batch, out):
                num[r + _CROP:r + _CROP + M, c + _CROP:c + _CROP + M] += patch * win
                den[r + _CROP:r + _CROP + M, c + _CROP:c + _CROP + M] += win
            logger.debug("[%d/%d] chunk composed", i, len(chunks))

    num = num[PAD:PAD + y.height, PAD:PAD + y.width]
    den = den[PAD:PAD + y.height, PAD:PAD + y.width]
    assert np.all(den > 0), "Hann partition has a hole"
    return Image(num / den)
