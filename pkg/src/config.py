import os
from dotenv import load_dotenv

load_dotenv()


def _get_int(key: str, default: int) -> int:
    """Get an integer from environment."""
    try:
        return int(os.getenv(key, str(default)))
    except ValueError:
        return default


def _get_float(key: str, default: float) -> float:
    """Get a float from environment."""
    try:
        return float(os.getenv(key, str(default)))
    except ValueError:
        return default


def _get_bool(key: str, default: bool = False) -> bool:
    """Get a boolean from environment."""
    val = os.getenv(key, str(default)).lower()
    return val in ("true", "1", "yes", "on")


# ---------------------------------------------------------------------------
# Reproducibility / parallelism
# ---------------------------------------------------------------------------
SEED = _get_int("DEBLUR_SEED", 0)

# Worker pool cap. 1 keeps every stage single-threaded.
THREADS = max(1, _get_int("DEBLUR_THREADS", 1))

# ---------------------------------------------------------------------------
# Patch geometry (fixed by the network's input/output layout)
# ---------------------------------------------------------------------------
PATCH_SIZE = 65
OUTPUT_SIZE = 33

# ---------------------------------------------------------------------------
# Degradation model
# ---------------------------------------------------------------------------
NOISE_SIGMA = _get_float("DEBLUR_NOISE_SIGMA", 0.01)

# ---------------------------------------------------------------------------
# Kernel synthesis
# ---------------------------------------------------------------------------
TRAIN_KERNEL_CANVAS = _get_int("DEBLUR_TRAIN_KERNEL_CANVAS", 25)
EVAL_KERNEL_CANVAS = _get_int("DEBLUR_EVAL_KERNEL_CANVAS", 51)

# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
CHECKPOINT_EVERY = _get_int("DEBLUR_CHECKPOINT_EVERY", 1000)
VAL_EVERY = _get_int("DEBLUR_VAL_EVERY", 500)
PREFETCH_BATCHES = _get_int("DEBLUR_PREFETCH_BATCHES", 4)

# ---------------------------------------------------------------------------
# Whole-image restoration
# ---------------------------------------------------------------------------
STRIDE = _get_int("DEBLUR_STRIDE", 4)
INFERENCE_CHUNK = _get_int("DEBLUR_INFERENCE_CHUNK", 256)

# ---------------------------------------------------------------------------
# Kernel estimation
# ---------------------------------------------------------------------------
KERNEL_SUPPORT = _get_int("DEBLUR_KERNEL_SUPPORT", 51)

# ---------------------------------------------------------------------------
# Non-blind deconvolution
# ---------------------------------------------------------------------------
PRIOR = os.getenv("DEBLUR_PRIOR", "hyperlap")
PRIOR_WEIGHT = _get_float("DEBLUR_PRIOR_WEIGHT", 5.0)
DECONV_ITERS = _get_int("DEBLUR_DECONV_ITERS", 8)

# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
MAX_SHIFT = _get_int("DEBLUR_MAX_SHIFT", 10)
BOUNDARY = _get_int("DEBLUR_BOUNDARY", 50)
SUCCESS_RATIO = _get_float("DEBLUR_SUCCESS_RATIO", 5.0)

# ---------------------------------------------------------------------------
# Results store / report templates
# ---------------------------------------------------------------------------
RESULTS_DB_PATH = os.getenv(
    "DEBLUR_RESULTS_DB",
    os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "benchmark_results.db"),
)
TEMPLATES_DIR = os.getenv(
    "DEBLUR_TEMPLATES_DIR",
    os.path.join(os.path.dirname(os.path.dirname(__file__)), "templates"),
)

# Quieten scientific-stack chatter when verbose logging is on
KEEP_VERBOSE_LIBS = _get_bool("DEBLUR_VERBOSE_LIBS", False)
