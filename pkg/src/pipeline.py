"""
The three-stage blind deblurring pipeline:
neural-average restoration -> global kernel estimate -> non-blind deconvolution.
"""

import logging
import time
from dataclasses import dataclass

from src import config
from src.blind_filter_net import NetworkWeights
from src.errors import DeblurError, PipelineError
from src.image_core import Image
from src.kernel_estimator import EstimatorConfig, KernelEstimate, estimate_kernel
from src.nonblind import DeconvConfig, deconvolve
from src.whole_image import restore

logger = logging.getLogger(__name__)

STAGE_RESTORE = "restore"
STAGE_ESTIMATE = "estimate-kernel"
STAGE_DECONV = "deconvolve"


@dataclass
class PipelineResult:
    initial: Image
    kernel: KernelEstimate | None
    final: Image | None
    timings: dict[str, float]


def _run_stage(stage: str, timings: dict, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except (DeblurError, ValueError, ArithmeticError) as e:
        raise PipelineError(stage, str(e)) from e
    timings[stage] = time.perf_counter() - start
    logger.info("Stage %s finished in %.1fs", stage, timings[stage])
    return result


def run_pipeline(
    y: Image,
    weights: NetworkWeights,
    stride: int = config.STRIDE,
    estimator: EstimatorConfig | None = None,
    deconv: DeconvConfig | None = None,
    threads: int = config.THREADS,
    initial_only: bool = False,
) -> PipelineResult:
    """Run the full pipeline on a blurry image. Failures raise PipelineError naming the stage."""
    timings: dict[str, float] = {}
    x_n = _run_stage(STAGE_RESTORE, timings, restore, y, weights, stride=stride, threads=threads)
    if initial_only:
        return PipelineResult(initial=x_n, kernel=None, final=None, timings=timings)

    est = _run_stage(STAGE_ESTIMATE, timings, estimate_kernel, x_n, y, estimator)
    final = _run_stage(STAGE_DECONV, timings, deconvolve, y, est.kernel, deconv)
    return PipelineResult(initial=x_n, kernel=est, final=final, timings=timings)
