import numpy as np
import pytest

from src.band_encoder import (
    BAND_NAMES,
    BandEncoding,
    BandWhitening,
    WhiteningTransform,
    _fit_band,
    apply_whitening,
    band_dim,
    encode,
    encode_raw,
    fit_whitening,
    invert_whitening,
    total_dim,
)
from src.errors import InsufficientSamplesError, ShapeMismatchError
from src.fourier import band_indices, canonical_members
from tests.oracles import naive_coeff


def _random_encoding(rng, batch=None) -> BandEncoding:
    lead = () if batch is None else (batch,)
    return BandEncoding(**{name: rng.standard_normal(lead + (band_dim(name),)) for name in BAND_NAMES})


class TestEncodeRaw:

    def test_dimensions(self):
        assert [band_dim(n) for n in BAND_NAMES] == [81, 208, 208, 208]
        assert total_dim() == 705

    def test_constant_patch_is_dc_only(self):
        e = encode_raw(np.full((65, 65), 0.25))
        assert abs(e.L[0] - 4225 * 0.25) < 1e-9
        assert np.max(np.abs(e.L[1:])) < 1e-9
        for name in ("B2", "B1", "H"):
            assert np.max(np.abs(e.band(name))) < 1e-9, f"band {name} should be empty"

    def test_cosine_lands_in_high_band(self):
        n1 = np.arange(65)[:, None] * np.ones((1, 65))
        patch = np.cos(2 * np.pi * 6 * n1 / 65)
        e = encode_raw(patch)
        assert np.max(np.abs(e.L)) < 1e-8
        assert np.max(np.abs(e.H)) > 1000.0

    @pytest.mark.parametrize("name,size", [("B1", 17), ("B2", 33), ("H", 65)])
    def test_matches_naive_crop_dft(self, rng, name, size):
        patch = rng.standard_normal((65, 65))
        off = (65 - size) // 2
        crop = patch[off:off + size, off:off + size]
        zs = canonical_members(band_indices(size, 4, 8))
        expected = np.empty(2 * len(zs))
        for i, (z1, z2) in enumerate(zs):
            c = naive_coeff(crop, int(z1), int(z2))
            expected[2 * i], expected[2 * i + 1] = c.real, c.imag
        np.testing.assert_allclose(encode_raw(patch).band(name), expected, atol=1e-10)

    def test_low_band_dc_first(self, rng):
        patch = rng.standard_normal((65, 65))
        e = encode_raw(patch)
        assert abs(e.L[0] - patch.sum()) < 1e-10
        z1, z2 = canonical_members(band_indices(65, 0, 4))[0]
        c = naive_coeff(patch, int(z1), int(z2))
        np.testing.assert_allclose(e.L[1:3], [c.real, c.imag], atol=1e-10)

    def test_linear(self, rng):
        a = rng.standard_normal((65, 65))
        b = rng.standard_normal((65, 65))
        lhs = encode_raw(3 * a - b)
        ea, eb = encode_raw(a), encode_raw(b)
        for name in BAND_NAMES:
            np.testing.assert_allclose(lhs.band(name), 3 * ea.band(name) - eb.band(name), atol=1e-9)

    def test_batched_matches_single(self, rng):
        stack = rng.standard_normal((3, 65, 65))
        batched = encode_raw(stack)
        assert batched.batch_size == 3
        single = encode_raw(stack[1])
        for name in BAND_NAMES:
            np.testing.assert_allclose(batched.band(name)[1], single.band(name), atol=1e-12)

    def test_wrong_size(self):
        with pytest.raises(ShapeMismatchError):
            encode_raw(np.zeros((33, 33)))


class TestWhitening:

    def test_too_few_samples(self, rng):
        with pytest.raises(InsufficientSamplesError):
            fit_whitening(_random_encoding(rng, batch=100))

    def test_identity_covariance_gives_near_identity(self, rng):
        dim = band_dim("L")
        samples = rng.standard_normal((400 * dim, dim))
        w = _fit_band(samples, "L")
        assert np.linalg.norm(w.matrix - np.eye(dim), ord=2) < 0.1

    def test_diagonal_covariance_is_whitened(self, rng):
        dim = band_dim("L")
        scales = np.ones(dim)
        scales[0] = 2.0
        samples = rng.standard_normal((10 * dim, dim)) * scales + 3.0
        w = _fit_band(samples, "L")
        white = (samples - w.mean) @ w.matrix.T
        cov = white.T @ white / len(white)
        assert np.max(np.abs(cov - np.eye(dim))) < 0.1

    def test_identical_samples_hit_floor(self, rng):
        n = 10 * 208
        one = _random_encoding(rng)
        samples = BandEncoding(**{k: np.tile(v, (n, 1)) for k, v in one.as_dict().items()})
        t = fit_whitening(samples)
        for name in BAND_NAMES:
            assert np.all(np.isfinite(t[name].matrix))
        out = apply_whitening(t, one)
        for name in BAND_NAMES:
            np.testing.assert_allclose(out.band(name), 0.0, atol=1e-6)

    def test_identity_transform(self, rng):
        e = _random_encoding(rng)
        out = apply_whitening(WhiteningTransform.identity(), e)
        for name in BAND_NAMES:
            np.testing.assert_array_equal(out.band(name), e.band(name))

    def test_mean_only(self, rng):
        e = _random_encoding(rng)
        means = {name: rng.standard_normal(band_dim(name)) for name in BAND_NAMES}
        t = WhiteningTransform({n: BandWhitening(means[n], np.eye(band_dim(n))) for n in BAND_NAMES})
        out = apply_whitening(t, e)
        for name in BAND_NAMES:
            np.testing.assert_allclose(out.band(name), e.band(name) - means[name], atol=1e-12)

    def test_inverse_round_trip(self, rng):
        t = WhiteningTransform({
            n: BandWhitening(rng.standard_normal(band_dim(n)), np.eye(band_dim(n)) + 0.1 * rng.standard_normal((band_dim(n),) * 2))
            for n in BAND_NAMES
        })
        e = _random_encoding(rng, batch=4)
        back = invert_whitening(t, apply_whitening(t, e))
        for name in BAND_NAMES:
            np.testing.assert_allclose(back.band(name), e.band(name), atol=1e-8)

    def test_dimension_mismatch(self, rng):
        t = WhiteningTransform({n: BandWhitening(np.zeros(3), np.eye(3)) for n in BAND_NAMES})
        with pytest.raises(ShapeMismatchError):
            apply_whitening(t, _random_encoding(rng))

    def test_encode_is_raw_then_whiten(self, rng):
        patch = rng.standard_normal((65, 65))
        t = WhiteningTransform.identity()
        for name in BAND_NAMES:
            np.testing.assert_allclose(encode(t, patch).band(name), encode_raw(patch).band(name))
