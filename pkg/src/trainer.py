"""
Training loop for the filter-prediction network.

Training pairs are synthesised on the fly: a random sharp crop (randomly
rotated/mirrored) is blurred with a random kernel and noised to give the
65x65 input; the target is the central 33x33 of the sharp crop, aligned
with the kernel's centre tap.

Every batch is drawn from its own seed stream keyed on (seed, iteration),
so prefetching on several threads yields exactly the batches a single
thread would. Validation pairs are drawn once, from separate images, and
reused for every evaluation.
"""

import csv
import logging
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from src import config
from src.band_encoder import BandEncoding, WhiteningTransform, apply_whitening, encode_raw, fit_whitening
from src.blind_filter_net import (
    ArchitectureConfig,
    NetworkWeights,
    apply_half,
    backward,
    batch_loss,
    forward_batch,
    init_weights,
    outputs_to_half,
)
from src.errors import ShapeMismatchError, TrainingDivergedError
from src.image_core import BlurKernel, Image, convolve_array, load_image, load_kernel
from src.weights_file import save_weights

logger = logging.getLogger(__name__)

N = config.PATCH_SIZE
M = config.OUTPUT_SIZE
_CROP = (N - M) // 2

# Seed-stream tags
_STREAM_WHITENING = 0
_STREAM_TRAIN = 1
_STREAM_VAL = 2

_IMAGE_SUFFIXES = (".png", ".pgm")
_KERNEL_SUFFIXES = (".txt", ".png", ".pgm")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    lr: float = 1.0
    lr_drop_every: int = 100_000
    lr_drop_factor: float = math.sqrt(2.0)
    drop_start: int = 800_000
    total_iters: int = 20_000
    noise_sigma: float = field(default_factory=lambda: config.NOISE_SIGMA)
    seed: int = field(default_factory=lambda: config.SEED)
    val_pairs: int = 512
    val_every: int = field(default_factory=lambda: config.VAL_EVERY)
    checkpoint_every: int = field(default_factory=lambda: config.CHECKPOINT_EVERY)
    whitening_samples: int = 4096
    prefetch: int = field(default_factory=lambda: config.PREFETCH_BATCHES)
    threads: int = field(default_factory=lambda: config.THREADS)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("batch_size", "lr", "lr_drop_every", "lr_drop_factor", "val_pairs", "val_every",
                     "checkpoint_every", "whitening_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_iters < 0 or self.noise_sigma < 0:
            raise ValueError("total_iters and noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# The drop schedule starts 8/18 of the way through a run and drops every 1/18.
_DROP_START_FRACTION = 8 / 18
_DROP_EVERY_FRACTION = 1 / 18


def with_total_iters(tcfg: TrainConfig, total_iters: int) -> TrainConfig:
    """Return tcfg running for total_iters, with the lr drop schedule rescaled to match."""
    return replace(
        tcfg,
        total_iters=total_iters,
        drop_start=round(total_iters * _DROP_START_FRACTION),
        lr_drop_every=max(1, round(total_iters * _DROP_EVERY_FRACTION)),
    )


DESK = with_total_iters(TrainConfig(), 20_000)
PAPER = with_total_iters(TrainConfig(batch_size=512, lr=32.0), 1_800_000)


@dataclass
class TrainingCorpus:
    train_images: list[Image]
    val_images: list[Image]
    kernels: list[BlurKernel]
    train_names: list[str] = field(default_factory=list)
    val_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.train_images or not self.val_images or not self.kernels:
            raise ValueError("Training corpus needs training images, validation images and kernels")
        shared = set(self.train_names) & set(self.val_names)
        if shared:
            raise ValueError(f"Training and validation image lists overlap: {sorted(shared)[:5]}")
        need = self.min_image_side
        for img in self.train_images + self.val_images:
            if min(img.height, img.width) < need:
                raise ShapeMismatchError(f"Corpus image {img.width}x{img.height} is smaller than {need}px")

    @property
    def max_kernel_size(self) -> int:
        return max(k.size for k in self.kernels)

    @property
    def min_image_side(self) -> int:
        return N + self.max_kernel_size - 1


@dataclass
class TrainResult:
    weights: NetworkWeights
    best_iter: int
    best_val_loss: float
    baseline_val_loss: float
    iterations: int
    history: list[dict]


@dataclass
class MomentumState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "MomentumState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


# ---------------------------------------------------------------------------
# Corpus loading
# ---------------------------------------------------------------------------

def list_files(directory: str, suffixes: tuple[str, ...]) -> list[str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"No such directory: {directory}")
    return sorted(
        os.path.join(directory, name) for name in os.listdir(directory) if name.lower().endswith(suffixes)
    )


def load_images(directory: str) -> tuple[list[Image], list[str]]:
    paths = list_files(directory, _IMAGE_SUFFIXES)
    return [load_image(p) for p in paths], [os.path.realpath(p) for p in paths]


def load_kernels(directory: str) -> list[BlurKernel]:
    return [load_kernel(p) for p in list_files(directory, _KERNEL_SUFFIXES)]


def load_corpus(image_dir: str, val_image_dir: str, kernels: list[BlurKernel]) -> TrainingCorpus:
    train, train_names = load_images(image_dir)
    val, val_names = load_images(val_image_dir)
    logger.info("Corpus: %d training images, %d validation images, %d kernels", len(train), len(val), len(kernels))
    return TrainingCorpus(train, val, kernels, train_names, val_names)


# ---------------------------------------------------------------------------
# Example synthesis
# ---------------------------------------------------------------------------

def dihedral(arr: np.ndarray, element: int) -> np.ndarray:
    """One of the 8 rotations/reflections of a square array (element 0..7)."""
    out = np.rot90(arr, element % 4)
    return np.fliplr(out) if element >= 4 else out


def make_example(
    rng: np.random.Generator,
    sharp: Image,
    k: BlurKernel,
    sigma: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    One (65x65 input, 33x33 target) pair from a random crop of `sharp`.

    The crop has side 65 + ks - 1 so that a valid convolution leaves 65x65;
    the target is crop[r+16 : r+49] in both axes with r = ks // 2, which is
    what the central 33x33 of the input would be under a delta kernel.
    """
    side = N + k.size - 1
    if sharp.height < side or sharp.width < side:
        raise ShapeMismatchError(f"Sharp image {sharp.width}x{sharp.height} is smaller than {side}px")
    r0 = int(rng.integers(0, sharp.height - side + 1))
    c0 = int(rng.integers(0, sharp.width - side + 1))
    crop = dihedral(sharp.data[r0:r0 + side, c0:c0 + side], int(rng.integers(0, 8)))

    blurred = convolve_array(crop, k.taps, mode="valid")
    if sigma > 0:
        blurred = blurred + rng.normal(0.0, sigma, size=blurred.shape)
    r = k.size // 2
    target = crop[r + _CROP:r + _CROP + M, r + _CROP:r + _CROP + M].copy()
    return blurred, target


def make_batch(rng: np.random.Generator, corpus_images: list[Image], kernels: list[BlurKernel], n: int, sigma: float):
    ys = np.empty((n, N, N))
    xs = np.empty((n, M, M))
    for i in range(n):
        img = corpus_images[int(rng.integers(0, len(corpus_images)))]
        k = kernels[int(rng.integers(0, len(kernels)))]
        ys[i], xs[i] = make_example(rng, img, k, sigma)
    return ys, xs


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

def lr_at(iteration: int, tcfg: TrainConfig) -> float:
    """Constant until drop_start, then divided by the drop factor every lr_drop_every iterations."""
    drops = max(0, (iteration - tcfg.drop_start) // tcfg.lr_drop_every)
    return tcfg.lr / tcfg.lr_drop_factor ** drops


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: MomentumState,
    lr: float,
    momentum: float,
) -> None:
    """Classical momentum: v = momentum*v - lr*g; w += v. Updates in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"Gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"Non-finite gradient in {name}", layer=name.rsplit(".", 1)[0])
    for name, g in grads.items():
        v = state.velocity[name]
        v *= momentum
        v -= lr * g
        params[name] += v


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationSet:
    y: np.ndarray
    x: np.ndarray
    raw: BandEncoding

    def __len__(self) -> int:
        return self.y.shape[0]


def make_validation_set(corpus: TrainingCorpus, tcfg: TrainConfig) -> ValidationSet:
    rng = np.random.default_rng([tcfg.seed, _STREAM_VAL])
    y, x = make_batch(rng, corpus.val_images, corpus.kernels, tcfg.val_pairs, tcfg.noise_sigma)
    return ValidationSet(y=y, x=x, raw=encode_raw(y))


def _slice_encoding(e: BandEncoding, sl: slice) -> BandEncoding:
    return BandEncoding(**{name: arr[sl] for name, arr in e.as_dict().items()})


def evaluate(w: NetworkWeights, val: ValidationSet, chunk: int = 256) -> float:
    """Mean per-patch MSE of the network on the fixed validation pairs."""
    total = 0.0
    for start in range(0, len(val), chunk):
        sl = slice(start, start + chunk)
        cache = forward_batch(w, apply_whitening(w.whitening, _slice_encoding(val.raw, sl)))
        x_hat = apply_half(outputs_to_half(cache.out), val.y[sl])
        total += float(np.sum((x_hat - val.x[sl]) ** 2))
    return total / (len(val) * M * M)


def keep_dc_baseline(val: ValidationSet) -> float:
    """Loss of the filter that keeps only DC (each output is the patch mean)."""
    means = val.y.mean(axis=(1, 2))[:, None, None]
    return float(np.mean((means - val.x) ** 2))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def fit_corpus_whitening(corpus: TrainingCorpus, tcfg: TrainConfig) -> WhiteningTransform:
    rng = np.random.default_rng([tcfg.seed, _STREAM_WHITENING])
    y, _ = make_batch(rng, corpus.train_images, corpus.kernels, tcfg.whitening_samples, tcfg.noise_sigma)
    return fit_whitening(encode_raw(y))


class BatchFeeder:
    """Produces batch t from its own seed stream; prefetches ahead on a pool."""

    def __init__(self, corpus: TrainingCorpus, tcfg: TrainConfig, first: int, last: int):
        self.corpus = corpus
        self.tcfg = tcfg
        self.next_to_submit = first
        self.last = last
        self.pool = ThreadPoolExecutor(max_workers=max(1, tcfg.threads))
        self.pending: deque = deque()
        for _ in range(max(1, tcfg.prefetch)):
            self._submit()

    def _make(self, t: int):
        rng = np.random.default_rng([self.tcfg.seed, _STREAM_TRAIN, t])
        y, x = make_batch(rng, self.corpus.train_images, self.corpus.kernels, self.tcfg.batch_size, self.tcfg.noise_sigma)
        return y, x, encode_raw(y)

    def _submit(self) -> None:
        if self.next_to_submit <= self.last:
            self.pending.append(self.pool.submit(self._make, self.next_to_submit))
            self.next_to_submit += 1

    def get(self):
        fut = self.pending.popleft()
        self._submit()
        return fut.result()

    def close(self) -> None:
        self.pool.shutdown(wait=True, cancel_futures=True)


class HistoryLog:
    """Append-only CSV: iter, lr, train_loss, val_loss."""

    FIELDS = ["iter", "lr", "train_loss", "val_loss"]

    def __init__(self, path: str | None):
        self.path = path
        self.rows: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(self.FIELDS)

    def append(self, iteration: int, lr: float, train_loss: float | None, val_loss: float | None) -> None:
        row = {"iter": iteration, "lr": lr, "train_loss": train_loss, "val_loss": val_loss}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(["" if row[k] is None else row[k] for k in self.FIELDS])


def train(
    corpus: TrainingCorpus,
    arch: ArchitectureConfig,
    tcfg: TrainConfig,
    out_path: str,
    log_path: str | None = None,
) -> TrainResult:
    """
    Fit whitening, initialise, run SGD. The weights with the lowest
    validation loss are written to `out_path` whenever they improve; a
    rolling checkpoint goes to `<out_path>.last.ndbw`.
    """
    whitening = fit_corpus_whitening(corpus, tcfg)
    w = init_weights(arch, whitening, tcfg.seed)
    val = make_validation_set(corpus, tcfg)
    history = HistoryLog(log_path)

    baseline = keep_dc_baseline(val)
    best_val = evaluate(w, val)
    best_iter = 0
    best = w.copy()
    history.append(0, lr_at(0, tcfg), None, best_val)
    save_weights(best, out_path)
    logger.info("Keep-DC baseline validation loss %.6g; initial network %.6g", baseline, best_val)

    last_path = out_path + ".last.ndbw"
    state = MomentumState.zeros_like(w.params)
    running: list[float] = []

    feeder = BatchFeeder(corpus, tcfg, 1, tcfg.total_iters) if tcfg.total_iters else None
    try:
        for t in range(1, tcfg.total_iters + 1):
            y, x, raw = feeder.get()
            e = apply_whitening(w.whitening, raw)
            cache = forward_batch(w, e)
            x_hat = apply_half(outputs_to_half(cache.out), y)
            train_loss = batch_loss(x_hat, x)
            if not math.isfinite(train_loss):
                raise TrainingDivergedError(f"Non-finite training loss at iteration {t}")
            grads = backward(w, e, y, x, cache)
            lr = lr_at(t, tcfg)
            sgd_step(w.params, grads, state, lr, tcfg.momentum)
            running.append(train_loss)

            if t % tcfg.val_every == 0 or t == tcfg.total_iters:
                val_loss = evaluate(w, val)
                history.append(t, lr, float(np.mean(running)), val_loss)
                logger.info(
                    "[%d/%d] lr %.4g train %.6g val %.6g (baseline %.6g)",
                    t, tcfg.total_iters, lr, float(np.mean(running)), val_loss, baseline,
                )
                running.clear()
                if val_loss < best_val:
                    best_val, best_iter, best = val_loss, t, w.copy()
                    save_weights(best, out_path)
            if t % tcfg.checkpoint_every == 0:
                save_weights(w, last_path)
    except TrainingDivergedError:
        logger.error("Training diverged; best checkpoint (iteration %d) kept at %s", best_iter, out_path)
        raise
    finally:
        if feeder:
            feeder.close()

    logger.info("Training done: best validation loss %.6g at iteration %d", best_val, best_iter)
    return TrainResult(
        weights=best,
        best_iter=best_iter,
        best_val_loss=best_val,
        baseline_val_loss=baseline,
        iterations=tcfg.total_iters,
        history=history.rows,
    )
