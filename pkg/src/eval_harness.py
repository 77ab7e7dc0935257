"""
Error-ratio evaluation and end-to-end benchmark runs.

The error ratio of a restoration is its aligned MSE against the ground
truth divided by the aligned MSE of the non-blind deconvolution of the same
blurry image with the true kernel. A restoration with ratio <= 5 counts as
a success. Alignment searches integer shifts and ignores a boundary band.
"""

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from src import config, db
from src.blind_filter_net import NetworkWeights
from src.errors import ImageTooSmallError, PipelineError, ShapeMismatchError
from src.image_core import BlurKernel, Image, add_gaussian_noise, convolve, load_kernel
from src.kernel_estimator import EstimatorConfig
from src.nonblind import DeconvConfig, deconvolve
from src.pipeline import STAGE_DECONV, STAGE_ESTIMATE, run_pipeline
from src.trainer import list_files, load_images
from src.weights_file import to_bytes
from src.whole_image import restore

logger = logging.getLogger(__name__)

VARIANT_FULL = "full"
VARIANT_NEURAL_AVG = "neural_avg"
VARIANTS = (VARIANT_FULL, VARIANT_NEURAL_AVG)

CSV_FIELDS = ["image", "kernel", "r", "success", "shift_x", "shift_y", "mse", "oracle_mse", "variant", "error"]
SUMMARY_FIELDS = ["variant", "scope", "n", "failed", "mean_r", "p95_r", "max_r", "success_rate"]


@dataclass
class EvalResult:
    mse: float
    oracle_mse: float
    ratio: float | None
    success: bool
    shift: tuple[int, int]
    variant: str = VARIANT_FULL

    @property
    def degenerate(self) -> bool:
        """Zero oracle MSE: the ratio is undefined."""
        return self.ratio is None


@dataclass(frozen=True)
class BenchmarkConfig:
    stride: int = field(default_factory=lambda: config.STRIDE)
    noise_sigma: float = field(default_factory=lambda: config.NOISE_SIGMA)
    seed: int = field(default_factory=lambda: config.SEED)
    max_shift: int = field(default_factory=lambda: config.MAX_SHIFT)
    boundary: int = field(default_factory=lambda: config.BOUNDARY)
    success_ratio: float = field(default_factory=lambda: config.SUCCESS_RATIO)
    threads: int = field(default_factory=lambda: config.THREADS)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    deconv: DeconvConfig = field(default_factory=DeconvConfig)
    resume: bool = True
    db_path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchmarkReport:
    rows: list[dict]
    summary: list[dict]
    run_key: str


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def aligned_mse(
    est: Image,
    gt: Image,
    max_shift: int = config.MAX_SHIFT,
    boundary: int = config.BOUNDARY,
) -> tuple[float, tuple[int, int]]:
    """
    Minimum over integer shifts (dy, dx) in [-max_shift, max_shift]^2 of the
    MSE between est[b+dy : H-b+dy, b+dx : W-b+dx] and gt[b : H-b, b : W-b].
    Ties keep the zero shift, then the first shift in row-major order.
    """
    if est.data.shape != gt.data.shape:
        raise ShapeMismatchError(f"Estimate {est.data.shape} and ground truth {gt.data.shape} differ")
    h, w = gt.data.shape
    margin = boundary + max_shift
    if h <= 2 * margin or w <= 2 * margin:
        raise ImageTooSmallError(
            f"{w}x{h} image cannot exclude a {boundary}px boundary with shifts up to {max_shift}px"
        )

    ref = gt.data[boundary:h - boundary, boundary:w - boundary]
    best_mse = float(np.mean((est.data[boundary:h - boundary, boundary:w - boundary] - ref) ** 2))
    best_shift = (0, 0)
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            win = est.data[boundary + dy:h - boundary + dy, boundary + dx:w - boundary + dx]
            mse = float(np.mean((win - ref) ** 2))
            if mse < best_mse:
                best_mse, best_shift = mse, (dy, dx)
    return best_mse, best_shift


def oracle_restoration(y: Image, k_gt: BlurKernel, deconv_cfg: DeconvConfig | None = None) -> Image:
    return deconvolve(y, k_gt, deconv_cfg)


def error_ratio(
    est: Image,
    y: Image,
    k_gt: BlurKernel,
    gt: Image,
    deconv_cfg: DeconvConfig | None = None,
    max_shift: int = config.MAX_SHIFT,
    boundary: int = config.BOUNDARY,
    success_ratio: float = config.SUCCESS_RATIO,
    oracle_mse: float | None = None,
    variant: str = VARIANT_FULL,
) -> EvalResult:
    """
    r = aligned_mse(est, gt) / aligned_mse(deconvolve(y, k_gt), gt).
    Pass `oracle_mse` to reuse a denominator already computed for this pair.
    """
    if oracle_mse is None:
        oracle_mse, _ = aligned_mse(oracle_restoration(y, k_gt, deconv_cfg), gt, max_shift, boundary)
    mse, shift = aligned_mse(est, gt, max_shift, boundary)
    if oracle_mse == 0:
        logger.warning("Oracle MSE is zero; error ratio undefined")
        return EvalResult(mse=mse, oracle_mse=0.0, ratio=None, success=False, shift=shift, variant=variant)
    ratio = mse / oracle_mse
    return EvalResult(mse=mse, oracle_mse=oracle_mse, ratio=ratio, success=ratio <= success_ratio,
                      shift=shift, variant=variant)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def synthesize_observation(sharp: Image, k: BlurKernel, sigma: float, rng: np.random.Generator) -> tuple[Image, Image]:
    """
    (blurry, ground truth): valid convolution plus noise, and the sharp image
    cropped by the kernel radius so both share one pixel grid.
    """
    r = k.size // 2
    y = add_gaussian_noise(convolve(sharp, k, mode="valid"), sigma, rng)
    gt = Image(sharp.data[r:sharp.height - r, r:sharp.width - r])
    return y, gt


def _row(image: str, kernel: str, variant: str, res: EvalResult | None, error: str = "") -> dict:
    if res is None:
        return {"image": image, "kernel": kernel, "r": None, "success": False, "shift_x": None, "shift_y": None,
                "mse": None, "oracle_mse": None, "variant": variant, "error": error}
    return {
        "image": image,
        "kernel": kernel,
        "r": res.ratio,
        "success": res.success,
        "shift_x": res.shift[1],
        "shift_y": res.shift[0],
        "mse": res.mse,
        "oracle_mse": res.oracle_mse,
        "variant": variant,
        "error": error if res.ratio is not None else (error or "zero oracle MSE"),
    }


def evaluate_pair(
    sharp: Image,
    k: BlurKernel,
    weights: NetworkWeights,
    cfg: BenchmarkConfig,
    rng: np.random.Generator,
    image_name: str = "",
    kernel_name: str = "",
) -> list[dict]:
    """Score the full pipeline and the neural-average-only estimate on one (image, kernel) pair."""
    y, gt = synthesize_observation(sharp, k, cfg.noise_sigma, rng)
    oracle_mse, _ = aligned_mse(oracle_restoration(y, k, cfg.deconv), gt, cfg.max_shift, cfg.boundary)
    kwargs = dict(deconv_cfg=cfg.deconv, max_shift=cfg.max_shift, boundary=cfg.boundary,
                  success_ratio=cfg.success_ratio, oracle_mse=oracle_mse)

    try:
        result = run_pipeline(y, weights, stride=cfg.stride, estimator=cfg.estimator, deconv=cfg.deconv, threads=1)
    except PipelineError as e:
        if e.stage not in (STAGE_ESTIMATE, STAGE_DECONV):
            raise
        # Neural average is still usable when a later stage fails
        x_n = restore(y, weights, stride=cfg.stride, threads=1)
        avg = error_ratio(x_n, y, k, gt, variant=VARIANT_NEURAL_AVG, **kwargs)
        return [_row(image_name, kernel_name, VARIANT_FULL, None, str(e)),
                _row(image_name, kernel_name, VARIANT_NEURAL_AVG, avg)]

    full = error_ratio(result.final, y, k, gt, variant=VARIANT_FULL, **kwargs)
    avg = error_ratio(result.initial, y, k, gt, variant=VARIANT_NEURAL_AVG, **kwargs)
    return [_row(image_name, kernel_name, VARIANT_FULL, full), _row(image_name, kernel_name, VARIANT_NEURAL_AVG, avg)]


def run_key_for(weights: NetworkWeights, cfg: BenchmarkConfig) -> str:
    """Identifies a benchmark run by its weights and effective configuration."""
    h = hashlib.sha256(to_bytes(weights)[-32:])
    settings = {k: v for k, v in cfg.to_dict().items() if k not in ("threads", "resume", "db_path")}
    h.update(json.dumps(settings, sort_keys=True, default=str).encode("utf-8"))
    return h.hexdigest()[:16]


def run_benchmark_pairs(
    images: list[tuple[str, Image]],
    kernels: list[tuple[str, BlurKernel]],
    weights: NetworkWeights,
    cfg: BenchmarkConfig,
) -> BenchmarkReport:
    """
    Evaluate every (image, kernel) pair. Each pair draws its noise from its
    own seed stream; pairs run in parallel and rows keep pair order. A
    failing pair is logged and recorded with its error; the run continues.
    """
    if not images or not kernels:
        raise ValueError("Benchmark needs at least one image and one kernel")
    run_key = run_key_for(weights, cfg)
    pairs = [(i, j) for i in range(len(images)) for j in range(len(kernels))]

    def run(idx: int) -> list[dict]:
        i, j = pairs[idx]
        img_name, img = images[i]
        k_name, k = kernels[j]
        if cfg.resume and db.is_pair_done(run_key, img_name, k_name, list(VARIANTS), cfg.db_path):
            logger.info("[%d/%d] %s x %s already scored, skipping", idx + 1, len(pairs), img_name, k_name)
            return db.load_rows(run_key, img_name, k_name, cfg.db_path)

        logger.info("[%d/%d] Evaluating %s x %s", idx + 1, len(pairs), img_name, k_name)
        rng = np.random.default_rng([cfg.seed, i, j])
        try:
            rows = evaluate_pair(img, k, weights, cfg, rng, img_name, k_name)
        except Exception as e:
            logger.exception("Error evaluating %s x %s", img_name, k_name)
            return [_row(img_name, k_name, v, None, f"{type(e).__name__}: {e}") for v in VARIANTS]
        if all(not r["error"] for r in rows):
            db.record_rows(run_key, rows, cfg.db_path)
        return rows

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        per_pair = list(pool.map(run, range(len(pairs))))
    rows = [r for pair_rows in per_pair for r in pair_rows]
    return BenchmarkReport(rows=rows, summary=summarize(rows), run_key=run_key)


def run_benchmark(image_dir: str, kernel_dir: str, weights: NetworkWeights, cfg: BenchmarkConfig) -> BenchmarkReport:
    imgs, paths = load_images(image_dir)
    kernel_paths = list_files(kernel_dir, (".txt", ".png", ".pgm"))
    images = [(os.path.basename(p), img) for p, img in zip(paths, imgs)]
    kernels = [(os.path.basename(p), load_kernel(p)) for p in kernel_paths]
    logger.info("Benchmark: %d images x %d kernels", len(images), len(kernels))
    return run_benchmark_pairs(images, kernels, weights, cfg)


# ---------------------------------------------------------------------------
# Summary / CSV
# ---------------------------------------------------------------------------

def _stats(rows: list[dict], variant: str, scope: str) -> dict:
    ratios = np.array([r["r"] for r in rows if r["r"] is not None], dtype=np.float64)
    failed = sum(1 for r in rows if r["r"] is None)
    n = len(rows)
    return {
        "variant": variant,
        "scope": scope,
        "n": n,
        "failed": failed,
        "mean_r": float(ratios.mean()) if ratios.size else None,
        "p95_r": float(np.percentile(ratios, 95)) if ratios.size else None,
        "max_r": float(ratios.max()) if ratios.size else None,
        "success_rate": sum(1 for r in rows if r["success"]) / n if n else None,
    }


def summarize(rows: list[dict]) -> list[dict]:
    """Per variant: overall statistics, then one success-rate line per kernel."""
    out = []
    for variant in VARIANTS:
        vrows = [r for r in rows if r["variant"] == variant]
        if not vrows:
            continue
        out.append(_stats(vrows, variant, "all"))
        for kernel in sorted({r["kernel"] for r in vrows}):
            out.append(_stats([r for r in vrows if r["kernel"] == kernel], variant, f"kernel:{kernel}"))
    return out


def write_csv(rows: list[dict], path: str, fields: list[str] = CSV_FIELDS) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: "" if r.get(k) is None else r[k] for k in fields})


def summary_path_for(csv_path: str) -> str:
    root, ext = os.path.splitext(csv_path)
    return f"{root}.summary{ext or '.csv'}"


def write_report(report: BenchmarkReport, csv_path: str) -> str:
    write_csv(report.rows, csv_path)
    summary_path = summary_path_for(csv_path)
    write_csv(report.summary, summary_path, SUMMARY_FIELDS)
    logger.info("Wrote %d rows to %s and summary to %s", len(report.rows), csv_path, summary_path)
    return summary_path
