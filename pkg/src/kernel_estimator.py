"""
Global blur-kernel estimation from the neural-average image.

Both the sharp estimate x_N and the blurry image y are filtered with a bank
of oriented Gaussian derivatives. Only the strongest 2% of the x_N-side
responses are kept (a_i); the y-side responses (b_i) are used as they are.
For each regularisation weight lambda the kernel minimising

    sum_i ||k * a_i - b_i||^2 + lambda ||k||_1

over a square support is found by half-quadratic splitting: a Fourier-domain
least-squares step for k alternates with soft-thresholding of an auxiliary
copy g while the coupling weight beta doubles each outer iteration. Each
candidate is cleaned up and scored by its unregularised cost; the cheapest
one wins.

Convolutions in the solver are circular on reflect-padded images.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from src import config
from src.errors import InsufficientTextureError, ShapeMismatchError
from src.fourier import kernel_otf
from src.image_core import BlurKernel, Image, convolve_array, reflect_pad

logger = logging.getLogger(__name__)

_SURROGATE_RTOL = 1e-9


@dataclass(frozen=True)
class EstimatorConfig:
    support: int = field(default_factory=lambda: config.KERNEL_SUPPORT)
    lambdas: tuple[float, ...] = tuple(float(v) for v in np.logspace(-4, -1, 5))
    beta_start: float = 1e-2
    beta_stop: float = 1e2
    beta_factor: float = 2.0
    inner_iters: int = 2
    gradient_keep_fraction: float = 0.02
    cleanup_floor: float = 1.0 / 20.0
    min_component_mass: float = 0.02
    pad: int = 50
    filter_sigma: float = 1.0
    filter_size: int = 7
    threads: int = field(default_factory=lambda: config.THREADS)

    def __post_init__(self):
        if self.support % 2 == 0 or self.support < 1:
            raise ValueError(f"Kernel support must be odd, got {self.support}")
        if not self.lambdas or any(v <= 0 for v in self.lambdas) or list(self.lambdas) != sorted(self.lambdas):
            raise ValueError(f"lambdas must be positive and ascending, got {self.lambdas}")
        if not 0 < self.gradient_keep_fraction <= 1:
            raise ValueError("gradient_keep_fraction must be in (0, 1]")
        if self.beta_factor <= 1 or self.beta_start <= 0 or self.beta_stop < self.beta_start:
            raise ValueError("beta schedule must be increasing")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def betas(self) -> list[float]:
        """Coupling weights relative to lambda, one per outer iteration."""
        out = []
        b = self.beta_start
        while b <= self.beta_stop * (1 + 1e-12):
            out.append(b)
            b *= self.beta_factor
        return out


@dataclass
class SolveTrace:
    """Surrogate objective after every half step, grouped by beta stage."""

    lam: float
    lam_abs: float
    stages: list[list[float]] = field(default_factory=list)
    rejected_steps: int = 0
    fallback: bool = False
    data_cost: float = float("nan")


@dataclass
class KernelEstimate:
    kernel: BlurKernel
    lam: float
    cost: float
    traces: list[SolveTrace]
    candidates: list[tuple[float, float]]


# ---------------------------------------------------------------------------
# Feature bank
# ---------------------------------------------------------------------------

def build_feature_bank(sigma: float = 1.0, size: int = 7) -> list[np.ndarray]:
    """
    16 filters: first and second Gaussian derivatives along orientations
    k*pi/8, k = 0..7. Each is zero-mean and has unit L1 norm.
    """
    r = size // 2
    rows, cols = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    gauss = np.exp(-(rows ** 2 + cols ** 2) / (2 * sigma ** 2))
    bank = []
    for order in (1, 2):
        for k in range(8):
            theta = k * np.pi / 8
            u = cols * np.cos(theta) + rows * np.sin(theta)
            if order == 1:
                f = -u / sigma ** 2 * gauss
            else:
                f = (u ** 2 / sigma ** 4 - 1 / sigma ** 2) * gauss
            f = f - f.mean()
            bank.append(f / np.abs(f).sum())
    return bank


def _mask_top(resp: np.ndarray, region: tuple[slice, slice], keep: float) -> np.ndarray:
    """Zero all but the top `keep` fraction of |resp| inside `region`, everything outside."""
    inner = resp[region]
    count = max(1, int(round(keep * inner.size)))
    flat = np.abs(inner).ravel()
    out = np.zeros_like(resp)
    if count >= flat.size:
        out[region] = inner
        return out
    idx = np.argpartition(flat, flat.size - count)[flat.size - count:]
    masked = np.zeros(flat.size)
    masked[idx] = inner.ravel()[idx]
    out[region] = masked.reshape(inner.shape)
    return out


def threshold_features(
    x_n: Image,
    bank: list[np.ndarray],
    keep: float = 0.02,
    pad: int = 0,
    threads: int = 1,
) -> list[np.ndarray]:
    """
    a_i = f_i * x_N with all but the strongest `keep` fraction of pixels
    zeroed. With pad > 0 the responses live on the reflect-padded grid and
    the padding band is always zero.
    """
    padded = reflect_pad(x_n.data, pad) if pad else x_n.data
    region = (slice(pad, pad + x_n.height), slice(pad, pad + x_n.width))
    # Filters have unit L1 norm, so this bounds the rounding residue of flat areas
    tol = 1e-12 * max(1.0, float(np.abs(padded).max()))

    def one(f: np.ndarray) -> np.ndarray:
        resp = convolve_array(padded, f, mode="same-reflect")
        resp[np.abs(resp) <= tol] = 0.0
        return _mask_top(resp, region, keep)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, bank))


def blurry_features(y: Image, bank: list[np.ndarray], pad: int = 0, threads: int = 1) -> list[np.ndarray]:
    """b_i = f_i * y on the reflect-padded grid, unmasked."""
    padded = reflect_pad(y.data, pad) if pad else y.data
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda f: convolve_array(padded, f, mode="same-reflect"), bank))


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

class _NormalEquations:
    """Per-frequency sums shared by every lambda: sum |A|^2, sum conj(A) B, sum |B|^2."""

    def __init__(self, a_list: list[np.ndarray], b_list: list[np.ndarray]):
        if len(a_list) != len(b_list) or not a_list:
            raise ShapeMismatchError("Need matching, non-empty feature lists")
        shape = a_list[0].shape
        if any(a.shape != shape for a in a_list) or any(b.shape != shape for b in b_list):
            raise ShapeMismatchError("All feature images must share one shape")
        if not any(np.any(a) for a in a_list):
            raise InsufficientTextureError("insufficient texture: every thresholded feature is zero")

        self.shape = shape
        self.n_pix = shape[0] * shape[1]
        self.aa = np.zeros(shape)
        self.ab = np.zeros(shape, dtype=np.complex128)
        self.bb = 0.0
        for a, b in zip(a_list, b_list):
            A = np.fft.fft2(a)
            B = np.fft.fft2(b)
            self.aa += np.abs(A) ** 2
            self.ab += np.conj(A) * B
            self.bb += float(np.sum(b * b))

    def data_cost(self, K: np.ndarray) -> float:
        """sum_i ||k * a_i - b_i||^2 for a transfer function K."""
        quad = np.sum(np.abs(K) ** 2 * self.aa - 2 * np.real(K * np.conj(self.ab))) / self.n_pix
        return float(quad + self.bb)


def _crop_support(k_full: np.ndarray, support: int) -> np.ndarray:
    """Origin-centred circular kernel -> support x support array, centre tap in the middle."""
    r = support // 2
    return np.roll(k_full, shift=(r, r), axis=(0, 1))[:support, :support].copy()


def shrink(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _surrogate(eq: _NormalEquations, K: np.ndarray, k: np.ndarray, g: np.ndarray, lam: float, beta: float) -> float:
    return eq.data_cost(K) + lam * float(np.abs(g).sum()) + beta * float(np.sum((k - g) ** 2))


def _solve(eq: _NormalEquations, lam_rel: float, cfg: EstimatorConfig) -> tuple[np.ndarray, SolveTrace]:
    lam = lam_rel * eq.bb
    trace = SolveTrace(lam=lam_rel, lam_abs=lam)
    s = cfg.support
    k = np.zeros((s, s))
    k[s // 2, s // 2] = 1.0
    g = k.copy()
    K = kernel_otf(k, eq.shape)

    for beta_rel in cfg.betas:
        beta = beta_rel * lam
        G = kernel_otf(g, eq.shape)
        current = _surrogate(eq, K, k, g, lam, beta)
        stage = [current]
        for _ in range(cfg.inner_iters):
            # k-step: full-grid least squares, projected onto the support
            k_full = np.fft.ifft2((eq.ab + beta * G) / (eq.aa + beta)).real
            k_new = _crop_support(k_full, s)
            K_new = kernel_otf(k_new, eq.shape)
            value = _surrogate(eq, K_new, k_new, g, lam, beta)
            if value <= current:
                k, K, current = k_new, K_new, value
            else:
                trace.rejected_steps += 1
            stage.append(current)

            # g-step: exact minimiser of lam|g| + beta (k - g)^2
            g = shrink(k, lam / (2 * beta))
            G = kernel_otf(g, eq.shape)
            value = _surrogate(eq, K, k, g, lam, beta)
            assert value <= current + _SURROGATE_RTOL * max(current, eq.bb), "HQS surrogate increased"
            current = value
            stage.append(current)
        trace.stages.append(stage)

    if not np.any(g > 0):
        trace.fallback = True
        g = np.zeros_like(k)
        g[np.unravel_index(np.argmax(k), k.shape)] = 1.0
    return g, trace


def cleanup_kernel(taps: np.ndarray, floor: float = 1.0 / 20.0, min_mass: float = 0.02) -> BlurKernel:
    """
    Clip to non-negative, zero taps below floor * max, drop 8-connected
    components holding less than min_mass of the total, renormalise.
    """
    k = np.clip(taps, 0.0, None)
    if k.max() <= 0:
        out = np.zeros_like(k)
        out[k.shape[0] // 2, k.shape[1] // 2] = 1.0
        return BlurKernel(out)
    k[k < floor * k.max()] = 0.0
    labels, n = ndimage.label(k > 0, structure=np.ones((3, 3)))
    if n > 1:
        masses = ndimage.sum(k, labels, index=np.arange(1, n + 1))
        total = k.sum()
        for i, mass in enumerate(masses, start=1):
            if mass < min_mass * total:
                k[labels == i] = 0.0
    return BlurKernel(k / k.sum())


def solve_kernel_l1(
    a_list: list[np.ndarray],
    b_list: list[np.ndarray],
    lam: float,
    cfg: EstimatorConfig,
    eq: _NormalEquations | None = None,
) -> tuple[BlurKernel, SolveTrace]:
    """
    One L1-regularised kernel solve for relative weight `lam` (scaled by
    sum_i ||b_i||^2). Returns the cleaned kernel and its solve trace.
    """
    eq = eq or _NormalEquations(a_list, b_list)
    g, trace = _solve(eq, lam, cfg)
    kernel = cleanup_kernel(g, cfg.cleanup_floor, cfg.min_component_mass)
    trace.data_cost = eq.data_cost(kernel_otf(kernel.taps, eq.shape))
    return kernel, trace


def estimate_kernel(x_n: Image, y: Image, cfg: EstimatorConfig | None = None) -> KernelEstimate:
    """Solve for every lambda and keep the candidate with the lowest unregularised cost."""
    cfg = cfg or EstimatorConfig()
    if x_n.data.shape != y.data.shape:
        raise ShapeMismatchError(f"x_N {x_n.data.shape} and y {y.data.shape} differ in size")

    bank = build_feature_bank(cfg.filter_sigma, cfg.filter_size)
    a_list = threshold_features(x_n, bank, cfg.gradient_keep_fraction, cfg.pad, cfg.threads)
    b_list = blurry_features(y, bank, cfg.pad, cfg.threads)
    eq = _NormalEquations(a_list, b_list)

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(lambda lam: solve_kernel_l1(a_list, b_list, lam, cfg, eq), cfg.lambdas))

    for kernel, trace in results:
        logger.debug(
            "lambda %.3g: data cost %.6g, %d rejected k-steps%s",
            trace.lam, trace.data_cost, trace.rejected_steps, " (single-tap fallback)" if trace.fallback else "",
        )
    best = min(range(len(results)), key=lambda i: results[i][1].data_cost)
    kernel, trace = results[best]
    assert all(trace.data_cost <= t.data_cost for _, t in results)
    logger.info("Selected lambda %.3g (cost %.6g) from %d candidates", trace.lam, trace.data_cost, len(results))
    return KernelEstimate(
        kernel=kernel,
        lam=trace.lam,
        cost=trace.data_cost,
        traces=[t for _, t in results],
        candidates=[(t.lam, t.data_cost) for _, t in results],
    )
