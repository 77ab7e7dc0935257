"""
Feed-forward predictor of per-patch deconvolution filters.

Topology (all hidden layers ReLU, output linear):
  layer 1   three groups, one per band pair (L,B2), (B2,B1), (B1,H)
  layer 2   two groups over the layer-1 group pairs (0,1) and (1,2)
  fc        fc_depth fully connected layers
  out       2 * 2112 reals = interleaved (re, im) of the packed half plane

The predicted filter G is applied in the DFT domain of the 65x65 observed
patch, and the central 33x33 of the inverse transform is the restored
patch. The DC coefficient is never predicted; it is fixed to 1.

Parameters live in a flat dict keyed "l1.0.W", "l1.0.b", ..., "out.b" with
weight matrices shaped [out x in]. Everything here works on batches; the
single-patch functions wrap the batched ones.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from src import config
from src.band_encoder import BAND_NAMES, BandEncoding, WhiteningTransform, band_dim
from src.errors import ShapeMismatchError
from src.fourier import (
    PackedSpectrum,
    Spectrum,
    half_length,
    hermitian_project,
    pack_grid,
    unpack_grid,
)

logger = logging.getLogger(__name__)

N = config.PATCH_SIZE
M = config.OUTPUT_SIZE
_CROP = (N - M) // 2
HALF_LEN = half_length(N)

LAYER1_PAIRS = (("L", "B2"), ("B2", "B1"), ("B1", "H"))
LAYER2_PAIRS = ((0, 1), (1, 2))


# ---------------------------------------------------------------------------
# Data structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchitectureConfig:
    group1_width: int = 64
    group2_width: int = 128
    fc_width: int = 256
    fc_depth: int = 3
    output_half_len: int = HALF_LEN

    def __post_init__(self):
        if min(self.group1_width, self.group2_width, self.fc_width, self.fc_depth) < 1:
            raise ValueError(f"Architecture widths and depth must be >= 1: {self}")
        if self.output_half_len != HALF_LEN:
            raise ValueError(f"output_half_len must be {HALF_LEN} for {N}x{N} patches")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "tiny": ArchitectureConfig(4, 4, 4, 1),
    "desk": ArchitectureConfig(64, 128, 256, 3),
    "paper": ArchitectureConfig(1024, 2048, 4096, 5),
}


def preset(name: str) -> ArchitectureConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"Unknown architecture preset {name!r} (choose from {', '.join(PRESETS)})") from None


@dataclass
class NetworkWeights:
    arch: ArchitectureConfig
    whitening: WhiteningTransform
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if set(self.params) != set(expected):
            raise ShapeMismatchError(f"Parameter names differ from the architecture: {sorted(set(self.params) ^ set(expected))}")
        self.params = {k: self.params[k] for k in expected}
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatchError(f"Parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.arch, self.whitening, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True, eq=False)
class FilterPrediction:
    """Packed 65x65 filter with dc fixed to 1."""

    g: PackedSpectrum
    singular_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.g.size != N:
            raise ShapeMismatchError(f"Filter must be {N}x{N}, got {self.g.size}")
        if self.g.dc != 1.0:
            raise ValueError(f"Filter dc must be exactly 1, got {self.g.dc}")


@dataclass
class ForwardCache:
    """Activations kept by forward for the matching backward."""

    inputs: dict[str, np.ndarray]
    acts: dict[str, np.ndarray]
    out: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.out.shape[0]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def param_shapes(arch: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names in their fixed serialisation order, with shapes."""
    shapes = {}
    for i, (a, b) in enumerate(LAYER1_PAIRS):
        shapes[f"l1.{i}.W"] = (arch.group1_width, band_dim(a) + band_dim(b))
        shapes[f"l1.{i}.b"] = (arch.group1_width,)
    for j in range(len(LAYER2_PAIRS)):
        shapes[f"l2.{j}.W"] = (arch.group2_width, 2 * arch.group1_width)
        shapes[f"l2.{j}.b"] = (arch.group2_width,)
    fan_in = len(LAYER2_PAIRS) * arch.group2_width
    for k in range(arch.fc_depth):
        shapes[f"fc.{k}.W"] = (arch.fc_width, fan_in)
        shapes[f"fc.{k}.b"] = (arch.fc_width,)
        fan_in = arch.fc_width
    shapes["out.W"] = (2 * arch.output_half_len, fan_in)
    shapes["out.b"] = (2 * arch.output_half_len,)
    return shapes


def init_weights(arch: ArchitectureConfig, whitening: WhiteningTransform, seed: int) -> NetworkWeights:
    """
    He-scaled Gaussian hidden weights, zero biases, zero output layer
    (so the untrained network predicts the keep-DC filter).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.startswith("out.") or name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
    w = NetworkWeights(arch, whitening, params)
    logger.info("Initialised network %s with %d parameters (seed %d)", arch.to_dict(), w.n_params, seed)
    return w


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _affine(params: dict, name: str, x: np.ndarray) -> np.ndarray:
    return x @ params[f"{name}.W"].T + params[f"{name}.b"]


def _batched_bands(e: BandEncoding) -> dict[str, np.ndarray]:
    return {name: np.atleast_2d(e.band(name)) for name in BAND_NAMES}


def forward_batch(w: NetworkWeights, e: BandEncoding) -> ForwardCache:
    """Run the network on a (whitened) encoding; returns raw outputs + cache."""
    p = w.params
    bands = _batched_bands(e)
    for name in BAND_NAMES:
        if bands[name].shape[-1] != band_dim(name):
            raise ShapeMismatchError(f"Band {name} has {bands[name].shape[-1]} values, expected {band_dim(name)}")

    acts = {}
    h1 = []
    for i, (a, b) in enumerate(LAYER1_PAIRS):
        z = _affine(p, f"l1.{i}", np.concatenate([bands[a], bands[b]], axis=1))
        acts[f"l1.{i}"] = np.maximum(z, 0.0)
        h1.append(acts[f"l1.{i}"])

    h2 = []
    for j, (a, b) in enumerate(LAYER2_PAIRS):
        z = _affine(p, f"l2.{j}", np.concatenate([h1[a], h1[b]], axis=1))
        acts[f"l2.{j}"] = np.maximum(z, 0.0)
        h2.append(acts[f"l2.{j}"])

    h = np.concatenate(h2, axis=1)
    for k in range(w.arch.fc_depth):
        h = np.maximum(_affine(p, f"fc.{k}", h), 0.0)
        acts[f"fc.{k}"] = h

    out = _affine(p, "out", h)
    return ForwardCache(inputs=bands, acts=acts, out=out)


def outputs_to_half(out: np.ndarray) -> np.ndarray:
    """(B, 4224) interleaved reals -> (B, 2112) complex half plane."""
    return out[..., 0::2] + 1j * out[..., 1::2]


def forward(w: NetworkWeights, e: BandEncoding) -> tuple[FilterPrediction, ForwardCache]:
    """Single-patch forward pass; dc of the prediction is 1."""
    cache = forward_batch(w, e)
    half = outputs_to_half(cache.out[0])
    return FilterPrediction(PackedSpectrum(size=N, dc=1.0, half=half)), cache


# ---------------------------------------------------------------------------
# Filter application and loss
# ---------------------------------------------------------------------------

def filter_grid(half: np.ndarray) -> np.ndarray:
    """Uncentred (..., 65, 65) filter grid with dc = 1."""
    return unpack_grid(1.0, half, N)


def apply_half(half: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Batched filter application: (B, 2112) x (B, 65, 65) -> (B, 33, 33)."""
    full = np.fft.ifft2(filter_grid(half) * np.fft.fft2(y)).real
    return full[..., _CROP:_CROP + M, _CROP:_CROP + M]


def apply_filter(g: FilterPrediction, y_patch: np.ndarray) -> np.ndarray:
    y_patch = np.asarray(y_patch, dtype=np.float64)
    if y_patch.shape != (N, N):
        raise ShapeMismatchError(f"apply_filter expects a {N}x{N} patch, got {y_patch.shape}")
    return apply_half(g.g.half, y_patch)


def loss(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Mean squared error over the 33x33 patch."""
    if x_hat.shape != x.shape:
        raise ShapeMismatchError(f"loss: {x_hat.shape} vs {x.shape}")
    return float(np.mean((x_hat - x) ** 2))


def batch_loss(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Per-patch MSE averaged over the batch."""
    return float(np.mean((x_hat - x) ** 2))


def identity_filter() -> FilterPrediction:
    return FilterPrediction(PackedSpectrum(size=N, dc=1.0, half=np.ones(HALF_LEN, dtype=np.complex128)))


def keep_dc_filter() -> FilterPrediction:
    return FilterPrediction(PackedSpectrum(size=N, dc=1.0, half=np.zeros(HALF_LEN, dtype=np.complex128)))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def output_gradient(y: np.ndarray, x_hat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    d(batch loss)/d(raw outputs), shape (B, 4224).

    The loss gradient on the crop is padded back into the 65x65 grid (P);
    with g = conj(Y) F{P} / N^2 the gradient on the canonical coefficient
    h = G[z] is (2 Re g[z], 2 Im g[z]), the factor 2 from its conjugate
    partner G[-z].
    """
    b = x_hat.shape[0]
    resid = 2.0 * (x_hat - x) / (M * M * b)
    padded = np.zeros(resid.shape[:-2] + (N, N))
    padded[..., _CROP:_CROP + M, _CROP:_CROP + M] = resid
    g = np.conj(np.fft.fft2(y)) * np.fft.fft2(padded) / (N * N)
    _, g_half = pack_grid(g)
    d_out = np.empty(g_half.shape[:-1] + (2 * HALF_LEN,))
    d_out[..., 0::2] = 2.0 * g_half.real
    d_out[..., 1::2] = 2.0 * g_half.imag
    return d_out


def backward(
    w: NetworkWeights,
    e: BandEncoding,
    y_patch: np.ndarray,
    x_p: np.ndarray,
    cache: ForwardCache,
    input_grad: bool = False,
) -> dict[str, np.ndarray] | tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """
    Exact gradients of the batch loss through filter application and the
    network. `y_patch` is (65, 65) or (B, 65, 65); `x_p` the matching
    33x33 targets. With input_grad=True also returns d loss / d encoding.
    """
    y = np.asarray(y_patch, dtype=np.float64).reshape(-1, N, N)
    x = np.asarray(x_p, dtype=np.float64).reshape(-1, M, M)
    bands = _batched_bands(e)
    if cache.batch_size != y.shape[0] or cache.batch_size != x.shape[0] or cache.batch_size != bands["L"].shape[0]:
        raise ShapeMismatchError(
            f"Stale cache: cached batch of {cache.batch_size}, got {y.shape[0]} patches / {x.shape[0]} targets"
        )
    if cache.out.shape[1] != 2 * w.arch.output_half_len:
        raise ShapeMismatchError("Stale cache: output width does not match the architecture")

    p = w.params
    grads: dict[str, np.ndarray] = {}
    x_hat = apply_half(outputs_to_half(cache.out), y)
    d = output_gradient(y, x_hat, x)

    def layer(name: str, inp: np.ndarray, d_out: np.ndarray) -> np.ndarray:
        grads[f"{name}.W"] = d_out.T @ inp
        grads[f"{name}.b"] = d_out.sum(axis=0)
        return d_out @ p[f"{name}.W"]

    depth = w.arch.fc_depth
    last = cache.acts[f"fc.{depth - 1}"]
    d = layer("out", last, d)
    for k in reversed(range(depth)):
        d = d * (cache.acts[f"fc.{k}"] > 0)
        inp = cache.acts[f"fc.{k - 1}"] if k else np.concatenate(
            [cache.acts[f"l2.{j}"] for j in range(len(LAYER2_PAIRS))], axis=1
        )
        d = layer(f"fc.{k}", inp, d)

    g2 = w.arch.group2_width
    g1 = w.arch.group1_width
    d_h1 = [np.zeros_like(cache.acts[f"l1.{i}"]) for i in range(len(LAYER1_PAIRS))]
    for j, (a, b) in enumerate(LAYER2_PAIRS):
        d_z = d[:, j * g2:(j + 1) * g2] * (cache.acts[f"l2.{j}"] > 0)
        inp = np.concatenate([cache.acts[f"l1.{a}"], cache.acts[f"l1.{b}"]], axis=1)
        d_in = layer(f"l2.{j}", inp, d_z)
        d_h1[a] += d_in[:, :g1]
        d_h1[b] += d_in[:, g1:]

    d_bands = {name: np.zeros_like(bands[name]) for name in BAND_NAMES}
    for i, (a, b) in enumerate(LAYER1_PAIRS):
        d_z = d_h1[i] * (cache.acts[f"l1.{i}"] > 0)
        inp = np.concatenate([bands[a], bands[b]], axis=1)
        d_in = layer(f"l1.{i}", inp, d_z)
        d_bands[a] += d_in[:, :band_dim(a)]
        d_bands[b] += d_in[:, band_dim(a):]

    ordered = {name: grads[name] for name in p}
    if input_grad:
        return ordered, d_bands
    return ordered


# ---------------------------------------------------------------------------
# Wiener oracle
# ---------------------------------------------------------------------------

def wiener_coefficients(K: Spectrum, S: np.ndarray, sigma: float) -> FilterPrediction:
    """
    Ideal per-frequency filter G = conj(K) S / (|K|^2 S + sigma^2) for a
    known kernel spectrum K, signal profile S (centred, per-pixel power) and
    noise level sigma. Frequencies with a zero denominator get G = 0 and are
    reported in `singular_mask`. The DC term is set to 1.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.shape != K.coeffs.shape:
        raise ShapeMismatchError(f"Signal profile {S.shape} does not match kernel spectrum {K.coeffs.shape}")
    if K.size != N:
        raise ShapeMismatchError(f"Wiener filter is defined on the {N}x{N} grid, got {K.size}")
    if np.any(S < 0) or sigma < 0:
        raise ValueError("Signal profile and sigma must be non-negative")

    num = np.conj(K.coeffs) * S
    den = np.abs(K.coeffs) ** 2 * S + sigma ** 2
    singular = den == 0
    G = np.zeros_like(num)
    np.divide(num, den, out=G, where=~singular)
    if np.any(singular):
        logger.debug("Wiener filter: %d singular frequencies zeroed", int(singular.sum()))

    grid = hermitian_project(np.fft.ifftshift(G))
    _, half = pack_grid(grid)
    return FilterPrediction(PackedSpectrum(size=N, dc=1.0, half=half.copy()), singular_mask=singular)
