#!/usr/bin/env python3
"""
Neural Blind Deblur
===================

Patch-wise neural prediction of deconvolution filters, composed into an
initial sharp estimate, followed by global kernel estimation and
non-blind deconvolution.

Usage:
    python main.py gen-kernels --n 2000 --out-dir kernels/
    python main.py train --images train/ --val-images val/ --synth 2000 --out w.ndbw --log history.csv
    python main.py deblur --in blurry.png --weights w.ndbw --out sharp.pgm
    python main.py estimate-kernel --sharp xN.pgm --blurry blurry.png --out k.txt
    python main.py deconv --in blurry.png --kernel k.txt --out sharp.pgm
    python main.py eval --images test/ --kernels kernels/ --weights w.ndbw --out report.csv
    python main.py replay sharp.pgm.json     # re-run a recorded invocation

Every subcommand accepts --threads, --seed and -v/--verbose, and writes a
JSON sidecar recording its argv and effective configuration.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

# Ensure project root is on the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src import config
from src.blind_filter_net import PRESETS, preset
from src.errors import DeblurError, PipelineError
from src.eval_harness import BenchmarkConfig, run_benchmark, write_report
from src.image_core import load_image, load_kernel, save_image, save_kernel
from src.kernel_estimator import EstimatorConfig, estimate_kernel
from src.kernel_synth import KernelSynthConfig, generate_bank, write_bank
from src.nonblind import BOUNDARIES, PRIORS, DeconvConfig, deconvolve
from src.pipeline import run_pipeline
from src.report import generate_report_plain, save_report_html
from src.trainer import DESK, PAPER, load_corpus, load_kernels, train, with_total_iters
from src.weights_file import load_weights

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )
    # Quieten noisy libraries
    if not config.KEEP_VERBOSE_LIBS:
        logging.getLogger("PIL").setLevel(logging.WARNING)


def write_sidecar(path: str, command: str, argv: list[str], settings: dict, outputs: list[str]) -> str:
    sidecar = path + ".json"
    os.makedirs(os.path.dirname(os.path.abspath(sidecar)), exist_ok=True)
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(
            {
                "command": command,
                "argv": argv,
                "config": settings,
                "outputs": outputs,
                "created": datetime.now(timezone.utc).isoformat(),
            },
            f,
            indent=2,
            default=str,
        )
    return sidecar


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_kernels(args, argv: list[str]) -> int:
    cfg = KernelSynthConfig(grid_sizes=tuple(args.grid), canvas=args.canvas)
    kernels = generate_bank(args.seed, cfg, args.n, threads=args.threads)
    paths = write_bank(kernels, args.out_dir)
    write_sidecar(os.path.join(args.out_dir, "gen-kernels"), "gen-kernels", argv,
                  {"synth": cfg.to_dict(), "seed": args.seed, "n": args.n}, paths)
    print(f"Wrote {len(paths)} kernels to {args.out_dir}")
    return EXIT_OK


def cmd_train(args, argv: list[str]) -> int:
    arch = preset(args.preset)
    base = PAPER if args.preset == "paper" else DESK
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "momentum": args.momentum,
        "val_pairs": args.val_pairs,
        "noise_sigma": args.sigma,
    }
    tcfg = replace(base, **{k: v for k, v in overrides.items() if v is not None})
    if args.iters is not None:
        tcfg = with_total_iters(tcfg, args.iters)

    if args.kernels:
        kernels = load_kernels(args.kernels)
    else:
        synth = KernelSynthConfig(canvas=config.TRAIN_KERNEL_CANVAS)
        kernels = generate_bank(tcfg.seed, synth, args.synth, threads=tcfg.threads)
    corpus = load_corpus(args.images, args.val_images, kernels)

    try:
        result = train(corpus, arch, tcfg, args.out, args.log)
    except DeblurError as e:
        raise PipelineError("train", str(e)) from e

    write_sidecar(args.out, "train", argv, {"arch": arch.to_dict(), "train": tcfg.to_dict()},
                  [args.out] + ([args.log] if args.log else []))
    print(
        f"Best validation loss {result.best_val_loss:.6g} at iteration {result.best_iter} "
        f"(keep-DC baseline {result.baseline_val_loss:.6g}); weights in {args.out}"
    )
    return EXIT_OK


def _deconv_config(args) -> DeconvConfig:
    overrides = {
        "prior": args.prior,
        "weight": args.prior_weight,
        "sigma": args.sigma,
        "iters": args.deconv_iters,
        "boundary": getattr(args, "boundary", None),
    }
    return replace(DeconvConfig(), **{k: v for k, v in overrides.items() if v is not None})


def _stem(path: str) -> str:
    return os.path.splitext(path)[0]


def cmd_deblur(args, argv: list[str]) -> int:
    y = load_image(args.input)
    weights = load_weights(args.weights)
    est_cfg = EstimatorConfig(support=args.support, threads=args.threads)
    deconv_cfg = _deconv_config(args)

    result = run_pipeline(
        y, weights, stride=args.stride, estimator=est_cfg, deconv=deconv_cfg,
        threads=args.threads, initial_only=args.initial_only,
    )

    initial_path = args.save_initial or f"{_stem(args.out)}.initial.pgm"
    outputs = []
    if args.initial_only:
        save_image(result.initial, args.out)
        outputs.append(args.out)
    else:
        kernel_path = args.kernel_out or f"{_stem(args.out)}.kernel.txt"
        save_image(result.initial, initial_path)
        save_kernel(result.kernel.kernel, kernel_path)
        save_image(result.final, args.out)
        outputs += [args.out, initial_path, kernel_path]

    write_sidecar(args.out, "deblur", argv, {
        "stride": args.stride,
        "estimator": est_cfg.to_dict(),
        "deconv": deconv_cfg.to_dict(),
        "selected_lambda": result.kernel.lam if result.kernel else None,
        "timings": result.timings,
    }, outputs)
    print(f"Wrote {', '.join(outputs)}")
    return EXIT_OK


def cmd_estimate_kernel(args, argv: list[str]) -> int:
    x_n = load_image(args.sharp)
    y = load_image(args.blurry)
    cfg = EstimatorConfig(support=args.support, threads=args.threads)
    try:
        est = estimate_kernel(x_n, y, cfg)
    except DeblurError as e:
        raise PipelineError("estimate-kernel", str(e)) from e
    save_kernel(est.kernel, args.out)
    write_sidecar(args.out, "estimate-kernel", argv,
                  {"estimator": cfg.to_dict(), "selected_lambda": est.lam, "candidates": est.candidates}, [args.out])
    print(f"Wrote {args.out} (lambda {est.lam:.3g})")
    return EXIT_OK


def cmd_deconv(args, argv: list[str]) -> int:
    y = load_image(args.input)
    k = load_kernel(args.kernel)
    cfg = _deconv_config(args)
    try:
        x = deconvolve(y, k, cfg)
    except (DeblurError, ValueError) as e:
        raise PipelineError("deconvolve", str(e)) from e
    save_image(x, args.out)
    write_sidecar(args.out, "deconv", argv, {"deconv": cfg.to_dict()}, [args.out])
    print(f"Wrote {args.out}")
    return EXIT_OK


def cmd_eval(args, argv: list[str]) -> int:
    weights = load_weights(args.weights)
    # Deconvolution assumes the noise level the observations were synthesised with
    if args.noise is not None and args.sigma is None:
        args.sigma = args.noise
    cfg = BenchmarkConfig(
        stride=args.stride,
        seed=args.seed,
        max_shift=args.max_shift,
        boundary=args.boundary_px,
        threads=args.threads,
        estimator=EstimatorConfig(support=args.support),
        deconv=_deconv_config(args),
        resume=not args.no_resume,
        db_path=args.db,
        **({"noise_sigma": args.noise} if args.noise is not None else {}),
    )
    report = run_benchmark(args.images, args.kernels, weights, cfg)
    summary_path = write_report(report, args.out)
    outputs = [args.out, summary_path]
    if args.html:
        save_report_html(report, args.html)
        outputs.append(args.html)
    write_sidecar(args.out, "eval", argv, {"benchmark": cfg.to_dict(), "run_key": report.run_key}, outputs)
    print(generate_report_plain(report))
    return EXIT_OK


def cmd_replay(args, argv: list[str]) -> int:
    with open(args.sidecar, "r", encoding="utf-8") as f:
        recorded = json.load(f)
    logger.info("Replaying %s: %s", recorded.get("command"), " ".join(recorded["argv"]))
    return run(recorded["argv"])


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=config.THREADS, help="Worker pool cap (default: %(default)s)")
    p.add_argument("--seed", type=int, default=config.SEED, help="Random seed (default: %(default)s)")
    p.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")


def _deconv_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prior", choices=PRIORS, default=None, help=f"Image prior (default: {config.PRIOR})")
    p.add_argument("--prior-weight", type=float, default=None, help="Prior weight gamma")
    p.add_argument("--sigma", type=float, default=None, help="Noise standard deviation")
    p.add_argument("--deconv-iters", type=int, default=None, help="Outer HQS iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Neural blind deblurring – filter prediction, kernel estimation, non-blind deconvolution",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-kernels", help="Synthesise random motion-blur kernels")
    p.add_argument("--n", type=int, required=True, help="Number of kernels (multiple of the grid-size count)")
    p.add_argument("--grid", type=int, nargs="+", default=[8, 16, 24], help="Control-point grid sizes")
    p.add_argument("--canvas", type=int, default=config.EVAL_KERNEL_CANVAS, help="Odd kernel canvas size")
    p.add_argument("--out-dir", required=True, help="Directory for kernel text files")
    _common(p)

    p = sub.add_parser("train", help="Train the filter-prediction network")
    p.add_argument("--images", required=True, help="Directory of sharp training images")
    p.add_argument("--val-images", required=True, help="Directory of sharp validation images (disjoint)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--kernels", help="Directory of kernels")
    src.add_argument("--synth", type=int, metavar="N", help="Synthesise N training kernels instead")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="Architecture preset")
    p.add_argument("--out", required=True, help="Output weights file (.ndbw)")
    p.add_argument("--log", default=None, help="History CSV path")
    p.add_argument("--iters", type=int, default=None, help="Total iterations")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="Initial learning rate")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--val-pairs", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None, help="Training noise standard deviation")
    _common(p)

    p = sub.add_parser("deblur", help="Run the full blind deblurring pipeline")
    p.add_argument("--in", dest="input", required=True, help="Blurry image (PGM/PNG)")
    p.add_argument("--weights", required=True, help="Network weights (.ndbw)")
    p.add_argument("--out", required=True, help="Output image")
    p.add_argument("--stride", type=int, default=config.STRIDE, help="Patch stride (default: %(default)s)")
    p.add_argument("--save-initial", default=None, help="Where to write the neural-average estimate")
    p.add_argument("--kernel-out", default=None, help="Where to write the estimated kernel")
    p.add_argument("--initial-only", action="store_true", help="Stop after the neural-average estimate")
    p.add_argument("--support", type=int, default=config.KERNEL_SUPPORT, help="Kernel support size")
    _deconv_flags(p)
    _common(p)

    p = sub.add_parser("estimate-kernel", help="Estimate the blur kernel from a sharp estimate and the blurry image")
    p.add_argument("--sharp", required=True, help="Sharp estimate x_N")
    p.add_argument("--blurry", required=True, help="Blurry image y")
    p.add_argument("--out", required=True, help="Kernel text file")
    p.add_argument("--support", type=int, default=config.KERNEL_SUPPORT)
    _common(p)

    p = sub.add_parser("deconv", help="Non-blind deconvolution with a known kernel")
    p.add_argument("--in", dest="input", required=True, help="Blurry image")
    p.add_argument("--kernel", required=True, help="Kernel file (text, PGM or PNG)")
    p.add_argument("--out", required=True, help="Output image")
    p.add_argument("--boundary", choices=BOUNDARIES, default=None)
    _deconv_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="Benchmark the pipeline on image x kernel pairs")
    p.add_argument("--images", required=True, help="Directory of sharp test images")
    p.add_argument("--kernels", required=True, help="Directory of ground-truth kernels")
    p.add_argument("--weights", required=True, help="Network weights (.ndbw)")
    p.add_argument("--out", required=True, help="Per-pair CSV report")
    p.add_argument("--html", default=None, help="Also render an HTML report here")
    p.add_argument("--stride", type=int, default=config.STRIDE)
    p.add_argument("--support", type=int, default=config.KERNEL_SUPPORT)
    p.add_argument("--max-shift", type=int, default=config.MAX_SHIFT)
    p.add_argument("--boundary-px", type=int, default=config.BOUNDARY, help="Ignored boundary width")
    p.add_argument("--noise", type=float, default=None, help="Noise added to the synthetic blurry images")
    p.add_argument("--db", default=None, help="Results store for resuming (default: DEBLUR_RESULTS_DB)")
    p.add_argument("--no-resume", action="store_true", help="Re-score pairs already in the results store")
    _deconv_flags(p)
    _common(p)

    p = sub.add_parser("replay", help="Re-run an invocation recorded in a JSON sidecar")
    p.add_argument("sidecar", help="Sidecar JSON written by an earlier run")
    _common(p)

    return parser


_COMMANDS = {
    "gen-kernels": cmd_gen_kernels,
    "train": cmd_train,
    "deblur": cmd_deblur,
    "estimate-kernel": cmd_estimate_kernel,
    "deconv": cmd_deconv,
    "eval": cmd_eval,
    "replay": cmd_replay,
}

_INPUT_FILES = {
    "deblur": ("input", "weights"),
    "estimate-kernel": ("sharp", "blurry"),
    "deconv": ("input", "kernel"),
    "eval": ("weights",),
    "replay": ("sidecar",),
}
_INPUT_DIRS = {
    "train": ("images", "val_images", "kernels"),
    "eval": ("images", "kernels"),
}


def _missing_inputs(args) -> list[str]:
    missing = []
    for name in _INPUT_FILES.get(args.command, ()):
        path = getattr(args, name)
        if path and not os.path.isfile(path):
            missing.append(path)
    for name in _INPUT_DIRS.get(args.command, ()):
        path = getattr(args, name)
        if path and not os.path.isdir(path):
            missing.append(path)
    return missing


def run(argv: list[str]) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    setup_logging(args.verbose)
    missing = _missing_inputs(args)
    if missing:
        parser.print_usage(sys.stderr)
        print(f"main.py {args.command}: error: missing input: {', '.join(missing)}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return _COMMANDS[args.command](args, list(argv))
    except PipelineError as e:
        logger.error("Pipeline failed at stage %s: %s", e.stage, e)
        print(f"error: {args.command} failed at stage {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (DeblurError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {args.command} failed at stage {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
