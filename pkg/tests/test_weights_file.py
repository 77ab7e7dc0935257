import hashlib

import numpy as np
import pytest

from src.band_encoder import BAND_NAMES
from src.errors import WeightsFileError
from src.weights_file import MAGIC, from_bytes, load_weights, save_weights, to_bytes


def _perturbed(w, rng):
    w = w.copy()
    for arr in w.params.values():
        arr += 0.01 * rng.standard_normal(arr.shape)
    return w


class TestWeightsFile:

    def test_round_trip(self, tiny_weights, rng, tmp_path):
        w = _perturbed(tiny_weights, rng)
        path = str(tmp_path / "w.ndbw")
        save_weights(w, path)
        back = load_weights(path)
        assert back.arch == w.arch
        for name in w.params:
            np.testing.assert_array_equal(back.params[name], w.params[name])
        for name in BAND_NAMES:
            np.testing.assert_array_equal(back.whitening[name].matrix, w.whitening[name].matrix)

    def test_header_and_trailer(self, tiny_weights):
        buf = to_bytes(tiny_weights)
        assert buf.startswith(MAGIC)
        assert hashlib.sha256(buf[:-32]).digest() == buf[-32:]

    def test_bad_magic(self, tiny_weights):
        buf = b"XXXX" + to_bytes(tiny_weights)[4:]
        with pytest.raises(WeightsFileError, match="magic"):
            from_bytes(buf)

    def test_checksum_mismatch(self, tiny_weights):
        buf = bytearray(to_bytes(tiny_weights))
        buf[len(MAGIC) + 40] ^= 0xFF
        with pytest.raises(WeightsFileError, match="checksum"):
            from_bytes(bytes(buf))

    def test_truncated(self, tiny_weights):
        buf = to_bytes(tiny_weights)
        with pytest.raises(WeightsFileError):
            from_bytes(buf[:len(buf) // 2])

    def test_truncated_body_with_valid_checksum(self, tiny_weights):
        body = to_bytes(tiny_weights)[:-32][:200]
        with pytest.raises(WeightsFileError, match="truncated"):
            from_bytes(body + hashlib.sha256(body).digest())

    def test_missing_file(self, tmp_path):
        with pytest.raises(WeightsFileError):
            load_weights(str(tmp_path / "missing.ndbw"))

    def test_non_finite_rejected(self, tiny_weights):
        w = tiny_weights.copy()
        w.params["out.b"][0] = np.nan
        with pytest.raises(WeightsFileError, match="non-finite"):
            from_bytes(to_bytes(w))
