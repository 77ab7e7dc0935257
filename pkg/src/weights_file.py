"""
Binary weights file (.ndbw).

Layout, all little-endian:
  b"NDBW1"
  5 x uint32      group1_width, group2_width, fc_width, fc_depth, output_half_len
  per band (L, B2, B1, H):
    uint32 dim, dim x f8 mean, dim*dim x f8 matrix (row-major)
  per parameter, in the network's fixed order:
    uint32 ndim, ndim x uint32 shape, prod(shape) x f8 values
  32 bytes        SHA-256 of everything above
"""

import hashlib
import logging
import os
import struct

import numpy as np

from src.band_encoder import BAND_NAMES, BandWhitening, WhiteningTransform
from src.blind_filter_net import ArchitectureConfig, NetworkWeights, param_shapes
from src.errors import WeightsFileError

logger = logging.getLogger(__name__)

MAGIC = b"NDBW1"
_DIGEST_LEN = hashlib.sha256().digest_size


def _u32(values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def _f8(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def to_bytes(w: NetworkWeights) -> bytes:
    a = w.arch
    parts = [MAGIC, _u32([a.group1_width, a.group2_width, a.fc_width, a.fc_depth, a.output_half_len])]
    for name in BAND_NAMES:
        band = w.whitening[name]
        parts += [_u32([band.dim]), _f8(band.mean), _f8(band.matrix)]
    for name in param_shapes(a):
        arr = w.params[name]
        parts += [_u32([arr.ndim]), _u32(arr.shape), _f8(arr)]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsFileError("Weights file is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def f8(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def from_bytes(buf: bytes) -> NetworkWeights:
    if not buf.startswith(MAGIC):
        raise WeightsFileError("Not a weights file (bad magic)")
    if len(buf) < len(MAGIC) + _DIGEST_LEN:
        raise WeightsFileError("Weights file is truncated")
    body, digest = buf[:-_DIGEST_LEN], buf[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsFileError("Weights file checksum mismatch")

    r = _Reader(body)
    r.take(len(MAGIC))
    try:
        arch = ArchitectureConfig(*r.u32(5))
    except ValueError as e:
        raise WeightsFileError(f"Invalid architecture in weights file: {e}") from e

    bands = {}
    for name in BAND_NAMES:
        (dim,) = r.u32()
        mean = r.f8((dim,))
        bands[name] = BandWhitening(mean=mean, matrix=r.f8((dim, dim)))

    params = {}
    for name, expected in param_shapes(arch).items():
        (ndim,) = r.u32()
        shape = r.u32(ndim)
        if shape != expected:
            raise WeightsFileError(f"Parameter {name} stored as {shape}, architecture expects {expected}")
        params[name] = r.f8(shape)
    if r.pos != len(body):
        raise WeightsFileError(f"{len(body) - r.pos} trailing bytes in weights file")

    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise WeightsFileError(f"Parameter {name} contains non-finite values")
    return NetworkWeights(arch, WhiteningTransform(bands), params)


def save_weights(w: NetworkWeights, path: str) -> None:
    """Write via a temp file and rename."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(to_bytes(w))
    os.replace(tmp, path)
    logger.debug("Saved weights to %s", path)


def load_weights(path: str) -> NetworkWeights:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise WeightsFileError(f"Cannot read weights file {path}: {e}") from e
    w = from_bytes(buf)
    logger.info("Loaded weights from %s (%d parameters)", path, w.n_params)
    return w
