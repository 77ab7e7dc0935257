import numpy as np
import pytest

from src.errors import InsufficientTextureError, ShapeMismatchError
from src.image_core import BlurKernel, Image, add_gaussian_noise, convolve, convolve_array
from src.kernel_estimator import (
    EstimatorConfig,
    _NormalEquations,
    blurry_features,
    build_feature_bank,
    cleanup_kernel,
    estimate_kernel,
    solve_kernel_l1,
    threshold_features,
)
from src.kernel_synth import centre_of_mass
from tests.oracles import natural_image, random_kernel


def ncc(a: np.ndarray, b: np.ndarray, max_shift: int = 2) -> float:
    """Best normalised cross-correlation over small integer shifts (same canvas size)."""
    best = -1.0
    bz = (b - b.mean()) / np.linalg.norm(b - b.mean())
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            s = np.roll(a, (dy, dx), axis=(0, 1))
            sz = s - s.mean()
            best = max(best, float(np.sum(sz * bz) / np.linalg.norm(sz)))
    return best


def _oracle_pair(seed: int, taps: np.ndarray, sigma: float, size: int = 140):
    rng = np.random.default_rng(seed)
    sharp = Image(natural_image(rng, size))
    k = BlurKernel(taps)
    y = add_gaussian_noise(convolve(sharp, k, "valid"), sigma, rng)
    r = k.size // 2
    x_n = Image(sharp.data[r:-r, r:-r])
    return x_n, y


@pytest.fixture
def cfg():
    return EstimatorConfig(support=25, threads=1)


class TestFeatureBank:

    def test_sixteen_zero_mean_filters(self):
        bank = build_feature_bank()
        assert len(bank) == 16
        for f in bank:
            assert f.shape == (7, 7)
            assert abs(f.mean()) < 1e-12
            assert np.abs(f).sum() == pytest.approx(1.0)

    def test_constant_image_has_no_features(self):
        a = threshold_features(Image(np.full((40, 40), 0.6)), build_feature_bank())
        assert all(not np.any(ai) for ai in a)

    def test_keep_fraction(self, rng):
        a = threshold_features(Image(rng.uniform(0, 1, (50, 50))), build_feature_bank(), keep=0.02)
        for ai in a:
            assert np.count_nonzero(ai) == 50

    def test_padding_band_is_zero(self, rng):
        a = threshold_features(Image(rng.uniform(0, 1, (30, 30))), build_feature_bank(), pad=10)
        for ai in a:
            assert ai.shape == (50, 50)
            assert not np.any(ai[:10]) and not np.any(ai[-10:])
            assert not np.any(ai[:, :10]) and not np.any(ai[:, -10:])

    def test_single_bright_pixel_matches_sort_oracle(self):
        img = np.zeros((20, 20))
        img[10, 10] = 1.0
        bank = build_feature_bank()
        for f, ai in zip(bank, threshold_features(Image(img), bank, keep=0.02)):
            resp = np.abs(convolve_array(img, f, "same-reflect"))
            thr = np.sort(resp.ravel())[::-1][7]
            kept = ai != 0
            assert kept.sum() <= 8
            assert np.all(resp[kept] >= thr - 1e-15)
            assert np.all(kept[resp > thr + 1e-15])


class TestSolver:

    def test_identity_pair_gives_delta(self, rng, cfg):
        bank = build_feature_bank()
        a = threshold_features(Image(natural_image(rng, 64)), bank, pad=10)
        kernel, _ = solve_kernel_l1(a, a, 1e-4, cfg)
        assert kernel.taps[12, 12] >= 0.99

    def test_surrogate_monotone_within_stages(self, cfg):
        x_n, y = _oracle_pair(1, random_kernel(np.random.default_rng(1), 11), 0.0, size=96)
        bank = build_feature_bank()
        a = threshold_features(x_n, bank, pad=cfg.pad)
        b = blurry_features(y, bank, pad=cfg.pad)
        _, trace = solve_kernel_l1(a, b, 1e-3, cfg)
        assert len(trace.stages) == len(cfg.betas)
        for stage in trace.stages:
            for before, after in zip(stage, stage[1:]):
                assert after <= before + 1e-9 * abs(before)

    def test_huge_lambda_collapses_to_single_tap(self, rng, cfg):
        bank = build_feature_bank()
        a = threshold_features(Image(natural_image(rng, 64)), bank, pad=10)
        kernel, trace = solve_kernel_l1(a, a, 1e6, cfg)
        assert trace.fallback
        assert np.count_nonzero(kernel.taps) == 1
        assert kernel.taps.sum() == pytest.approx(1.0, abs=1e-12)

    def test_no_texture(self, cfg):
        zeros = [np.zeros((20, 20)) for _ in range(16)]
        with pytest.raises(InsufficientTextureError, match="insufficient texture"):
            _NormalEquations(zeros, zeros)

    def test_noise_free_oracle_recovery(self, cfg):
        taps = random_kernel(np.random.default_rng(21), 11)
        x_n, y = _oracle_pair(21, taps, 0.0)
        est = estimate_kernel(x_n, y, cfg)
        assert ncc(est.kernel.taps, BlurKernel(taps).padded(25).taps) >= 0.95


class TestCleanup:

    def test_removes_isolated_and_small_taps(self):
        taps = np.zeros((15, 15))
        taps[6:9, 6:9] = 4.0 / 9
        taps[0, 0] = 0.06
        taps[14, 14] = 0.01
        taps[7, 10] = -0.5
        k = cleanup_kernel(taps)
        assert k.taps[0, 0] == 0 and k.taps[14, 14] == 0 and k.taps[7, 10] == 0
        np.testing.assert_allclose(k.taps[6:9, 6:9], 1.0 / 9)

    def test_keeps_substantial_components(self):
        taps = np.zeros((9, 9))
        taps[2, 2] = 0.5
        taps[6, 6] = 0.5
        k = cleanup_kernel(taps)
        assert k.taps[2, 2] == 0.5 and k.taps[6, 6] == 0.5

    def test_empty_input_gives_delta(self):
        k = cleanup_kernel(-np.ones((5, 5)))
        assert k.taps[2, 2] == 1.0


class TestEstimateKernel:

    def test_selection_is_arg_min(self, cfg):
        x_n, y = _oracle_pair(4, random_kernel(np.random.default_rng(4), 9), 0.01, size=96)
        est = estimate_kernel(x_n, y, cfg)
        costs = [c for _, c in est.candidates]
        assert len(costs) == len(cfg.lambdas)
        assert est.cost == min(costs)
        assert est.lam == est.candidates[int(np.argmin(costs))][0]

    def test_output_is_a_valid_kernel(self, cfg):
        x_n, y = _oracle_pair(5, random_kernel(np.random.default_rng(5), 9), 0.01, size=96)
        k = estimate_kernel(x_n, y, cfg).kernel
        assert k.size == 25 and np.all(k.taps >= 0) and abs(k.taps.sum() - 1) < 1e-9

    def test_identical_images_give_centred_delta_like_kernel(self, rng, cfg):
        x = Image(natural_image(rng, 80))
        k = estimate_kernel(x, x, cfg).kernel
        assert np.unravel_index(np.argmax(k.taps), k.taps.shape) == (12, 12)
        r, c = centre_of_mass(k.taps)
        assert abs(r - 12) <= 1.0 and abs(c - 12) <= 1.0

    def test_deterministic(self, cfg):
        x_n, y = _oracle_pair(6, random_kernel(np.random.default_rng(6), 9), 0.01, size=80)
        a = estimate_kernel(x_n, y, cfg).kernel
        b = estimate_kernel(x_n, y, EstimatorConfig(support=25, threads=4)).kernel
        np.testing.assert_array_equal(a.taps, b.taps)

    def test_noisy_oracle_recovery(self, cfg):
        hits = 0
        for seed in range(10):
            taps = random_kernel(np.random.default_rng(100 + seed), 11)
            x_n, y = _oracle_pair(200 + seed, taps, 0.01)
            est = estimate_kernel(x_n, y, cfg)
            if ncc(est.kernel.taps, BlurKernel(taps).padded(25).taps) >= 0.90:
                hits += 1
        assert hits >= 8

    def test_noisy_oracle_recovery_at_default_support(self):
        cfg = EstimatorConfig(threads=1)
        assert cfg.support == 51
        hits = 0
        for seed in range(10):
            taps = random_kernel(np.random.default_rng(300 + seed), 11)
            x_n, y = _oracle_pair(400 + seed, taps, 0.01, size=200)
            est = estimate_kernel(x_n, y, cfg)
            assert est.kernel.size == 51
            if ncc(est.kernel.taps, BlurKernel(taps).padded(51).taps) >= 0.90:
                hits += 1
        assert hits >= 8

    def test_size_mismatch(self, cfg):
        with pytest.raises(ShapeMismatchError):
            estimate_kernel(Image(np.zeros((40, 40))), Image(np.zeros((30, 40))), cfg)

    def test_constant_image(self, cfg):
        with pytest.raises(InsufficientTextureError):
            estimate_kernel(Image(np.full((60, 60), 0.5)), Image(np.full((60, 60), 0.5)), cfg)

    @pytest.mark.parametrize("bad", [dict(support=24), dict(lambdas=(1e-2, 1e-3))])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            EstimatorConfig(**bad)
