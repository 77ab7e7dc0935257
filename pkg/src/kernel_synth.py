"""
Random motion-blur kernels from splines through random control points.

A kernel is drawn by scattering a handful of points in a small grid,
passing a Catmull-Rom spline through them in the order they were drawn,
rasterising the curve with bilinear splats, giving every touched pixel a
random positive value, normalising to unit mass, and shifting the result
so its centre of mass sits on the canvas centre.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from src import config
from src.errors import KernelError
from src.image_core import BlurKernel, save_kernel

logger = logging.getLogger(__name__)

_MAX_STEP_PX = 0.5
_MIN_COVERAGE = 0.05
_MAX_SAMPLES_PER_SEGMENT = 1 << 14
_SHARD_SIZE = 500


@dataclass(frozen=True)
class KernelSynthConfig:
    grid_sizes: tuple[int, ...] = (8, 16, 24)
    control_points: int = 6
    value_mean: float = 1.0
    value_std: float = 0.5
    canvas: int = field(default_factory=lambda: config.TRAIN_KERNEL_CANVAS)
    max_retries: int = 50

    def __post_init__(self):
        if not self.grid_sizes or min(self.grid_sizes) < 1:
            raise ValueError(f"grid_sizes must be positive, got {self.grid_sizes}")
        if self.canvas % 2 == 0:
            raise ValueError(f"Kernel canvas must be odd, got {self.canvas}")
        if self.canvas < max(self.grid_sizes) + 1:
            raise ValueError(f"Canvas {self.canvas} cannot hold grid size {max(self.grid_sizes)}")
        if self.control_points < 1:
            raise ValueError("Need at least one control point")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Spline rasterisation
# ---------------------------------------------------------------------------

def _catmull_rom_segment(p0, p1, p2, p3, t: np.ndarray) -> np.ndarray:
    t = t[:, None]
    return 0.5 * (
        2 * p1
        + (p2 - p0) * t
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t ** 2
        + (3 * p1 - p0 - 3 * p2 + p3) * t ** 3
    )


def spline_samples(points: np.ndarray) -> np.ndarray:
    """
    Dense samples along the uniform Catmull-Rom spline through `points`
    (endpoints duplicated), with consecutive samples < 0.5 px apart.
    """
    ext = np.vstack([points[:1], points, points[-1:]])
    out = [points[:1]]
    for i in range(len(points) - 1):
        p0, p1, p2, p3 = ext[i], ext[i + 1], ext[i + 2], ext[i + 3]
        n = 8
        while True:
            seg = _catmull_rom_segment(p0, p1, p2, p3, np.linspace(0.0, 1.0, n + 1))
            step = np.max(np.linalg.norm(np.diff(seg, axis=0), axis=1))
            if step < _MAX_STEP_PX or n >= _MAX_SAMPLES_PER_SEGMENT:
                break
            n *= 2
        out.append(seg[1:])
    return np.vstack(out)


def rasterise(samples: np.ndarray, size: int) -> np.ndarray:
    """
    Accumulate bilinear splats of the samples, each weighted by its share of
    arc length, on a size x size grid. A curve of zero length lands on the
    nearest pixel with weight 1.
    """
    cov = np.zeros((size, size))
    steps = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    if steps.sum() == 0:
        r, c = np.rint(samples[0]).astype(int)
        cov[r, c] = 1.0
        return cov

    weights = np.zeros(len(samples))
    weights[:-1] += steps / 2
    weights[1:] += steps / 2

    r0 = np.floor(samples[:, 0]).astype(int)
    c0 = np.floor(samples[:, 1]).astype(int)
    fr = samples[:, 0] - r0
    fc = samples[:, 1] - c0
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr = np.minimum(r0 + dr, size - 1)
            cc = np.minimum(c0 + dc, size - 1)
            np.add.at(cov, (rr, cc), weights * wr * wc)
    return cov


# ---------------------------------------------------------------------------
# Centring
# ---------------------------------------------------------------------------

def centre_of_mass(taps: np.ndarray) -> tuple[float, float]:
    rows, cols = np.indices(taps.shape)
    total = taps.sum()
    return float((rows * taps).sum() / total), float((cols * taps).sum() / total)


def center_kernel(taps: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """
    Integer-shift a kernel so its value-weighted centre of mass is within
    half a pixel of the canvas centre. Raises KernelError if the shifted
    support would leave the canvas. Applying it twice is a no-op.
    """
    size = taps.shape[0]
    centre = (size - 1) / 2
    com_r, com_c = centre_of_mass(taps)
    dr, dc = int(np.rint(centre - com_r)), int(np.rint(centre - com_c))
    if dr == 0 and dc == 0:
        return taps, (0, 0)

    rows, cols = np.nonzero(taps)
    if rows.min() + dr < 0 or rows.max() + dr >= size or cols.min() + dc < 0 or cols.max() + dc >= size:
        raise KernelError(f"Centred support does not fit a {size}px canvas (shift {dr}, {dc})")
    out = np.zeros_like(taps)
    out[rows + dr, cols + dc] = taps[rows, cols]
    return out, (dr, dc)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _draw(rng: np.random.Generator, cfg: KernelSynthConfig, grid_size: int, points: np.ndarray | None) -> np.ndarray | None:
    if points is None:
        points = rng.uniform(0.0, grid_size, size=(cfg.control_points, 2))
    samples = np.clip(spline_samples(np.asarray(points, dtype=np.float64)), 0.0, grid_size - 1)
    cov = rasterise(samples, grid_size + 1)

    touched = cov > _MIN_COVERAGE
    values = np.zeros_like(cov)
    values[touched] = np.clip(rng.normal(cfg.value_mean, cfg.value_std, size=int(touched.sum())), 0.0, None)
    if values.sum() <= 0:
        return None

    canvas = np.zeros((cfg.canvas, cfg.canvas))
    off = (cfg.canvas - grid_size - 1) // 2
    canvas[off:off + grid_size + 1, off:off + grid_size + 1] = values / values.sum()
    try:
        taps, _ = center_kernel(canvas)
    except KernelError:
        return None
    return taps


def sample_kernel(
    rng: np.random.Generator,
    cfg: KernelSynthConfig,
    grid_size: int,
    points: np.ndarray | None = None,
) -> BlurKernel:
    """
    Draw one kernel from grid `grid_size`. `points` forces the control
    points (tests use it for degenerate curves). Draws with no mass or an
    uncentrable support are retried up to cfg.max_retries times.
    """
    if grid_size not in cfg.grid_sizes:
        raise KernelError(f"Grid size {grid_size} is not one of {cfg.grid_sizes}")
    for attempt in range(cfg.max_retries):
        taps = _draw(rng, cfg, grid_size, points)
        if taps is not None:
            return BlurKernel(taps / taps.sum())
        logger.debug("Kernel draw %d at grid %d rejected, resampling", attempt + 1, grid_size)
    raise KernelError(f"Gave up synthesising a grid-{grid_size} kernel after {cfg.max_retries} attempts")


def batch_kernels(rng: np.random.Generator, cfg: KernelSynthConfig, n: int) -> list[BlurKernel]:
    """n kernels, an equal share per grid size, in grid-size order."""
    per_size, rem = divmod(n, len(cfg.grid_sizes))
    if rem:
        raise ValueError(f"n={n} is not divisible by the {len(cfg.grid_sizes)} grid sizes")
    return [sample_kernel(rng, cfg, g) for g in cfg.grid_sizes for _ in range(per_size)]


def generate_bank(seed: int, cfg: KernelSynthConfig, n: int, threads: int = 1) -> list[BlurKernel]:
    """
    Sharded version of batch_kernels for large banks. Shards are fixed
    blocks of one grid size, each with its own spawned seed stream, so the
    bank does not depend on the thread count.
    """
    per_size, rem = divmod(n, len(cfg.grid_sizes))
    if rem:
        raise ValueError(f"n={n} is not divisible by the {len(cfg.grid_sizes)} grid sizes")

    shards = []
    for g in cfg.grid_sizes:
        for start in range(0, per_size, _SHARD_SIZE):
            shards.append((g, min(_SHARD_SIZE, per_size - start)))
    streams = np.random.SeedSequence(seed).spawn(len(shards))

    def run(i: int) -> list[BlurKernel]:
        g, count = shards[i]
        rng = np.random.default_rng(streams[i])
        return [sample_kernel(rng, cfg, g) for _ in range(count)]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, range(len(shards))))
    bank = [k for shard in results for k in shard]
    logger.info("Generated %d kernels in %d shards (grid sizes %s)", len(bank), len(shards), list(cfg.grid_sizes))
    return bank


def write_bank(kernels: list[BlurKernel], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    width = max(4, len(str(len(kernels))))
    paths = []
    for i, k in enumerate(kernels):
        path = os.path.join(out_dir, f"kernel_{i:0{width}d}.txt")
        save_kernel(k, path)
        paths.append(path)
    return paths


def support_bbox(k: BlurKernel) -> tuple[int, int]:
    """(height, width) of the bounding box of the non-zero taps."""
    rows, cols = np.nonzero(k.taps)
    return int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1)
