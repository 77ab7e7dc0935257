import numpy as np
import pytest

from src.errors import PipelineError
from src.image_core import BlurKernel, Image, convolve
from src.kernel_estimator import EstimatorConfig
from src.nonblind import DeconvConfig
from src.pipeline import STAGE_ESTIMATE, STAGE_RESTORE, run_pipeline
from tests.oracles import natural_image, random_kernel


@pytest.fixture
def blurry(rng):
    sharp = Image(natural_image(rng, 72))
    return convolve(sharp, BlurKernel(random_kernel(rng, 5, taps=5)), "valid")


@pytest.fixture
def small_cfgs():
    return (
        EstimatorConfig(support=9, lambdas=(1e-3, 1e-2), threads=1),
        DeconvConfig(prior="l2", weight=5.0, sigma=0.01),
    )


class TestPipeline:

    def test_full_run(self, blurry, tiny_weights, small_cfgs):
        est_cfg, deconv_cfg = small_cfgs
        result = run_pipeline(blurry, tiny_weights, stride=8, estimator=est_cfg, deconv=deconv_cfg, threads=1)
        assert result.initial.data.shape == blurry.data.shape
        assert result.final.data.shape == blurry.data.shape
        assert result.kernel.kernel.size == 9
        assert set(result.timings) == {"restore", "estimate-kernel", "deconvolve"}

    def test_initial_only(self, blurry, tiny_weights):
        result = run_pipeline(blurry, tiny_weights, stride=8, threads=1, initial_only=True)
        assert result.kernel is None and result.final is None
        assert list(result.timings) == ["restore"]

    def test_flat_image_fails_at_kernel_estimation(self, tiny_weights, small_cfgs):
        est_cfg, deconv_cfg = small_cfgs
        flat = Image(np.full((48, 48), 0.4))
        with pytest.raises(PipelineError) as info:
            run_pipeline(flat, tiny_weights, stride=8, estimator=est_cfg, deconv=deconv_cfg, threads=1)
        assert info.value.stage == STAGE_ESTIMATE
        assert str(info.value).startswith("estimate-kernel: insufficient texture")

    def test_bad_stride_fails_at_restore(self, blurry, tiny_weights):
        with pytest.raises(PipelineError) as info:
            run_pipeline(blurry, tiny_weights, stride=0, threads=1)
        assert info.value.stage == STAGE_RESTORE
