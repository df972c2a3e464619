#!/usr/bin/env python3
"""
Zero-shot Blind Deconvolution - Command Line Tool

Subcommands:
    deblur   estimate kernel and sharp image from one blurry image
    synth    synthesize a (sharp, kernel, blurry) pair from a sharp image
    eval     score a restoration against ground truth
    bench    sweep a dataset directory into a CSV results table
    verify   run the gradient/simplex/convolution/metric property suites

Exit statuses: 0 ok, 1 verification failure, 2 usage or input error,
3 numerical divergence.
"""

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

import blur_data
import metrics
import solver
from bench_runner import BenchRunner
from config_setup import choose_lambda, resolve_run_config
from deblur_errors import ConfigurationError, DeblurError, DivergenceError
from solver import RunConfig, RunReport
from verification import SUITES, GradcheckCase, run_verification

TOOL_VERSION = "1.0.0"

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

logger = logging.getLogger(__name__)


def setup_logging(log_dir: Optional[Path], verbose: bool = False, name: str = "selfdeblur") -> Optional[Path]:
    """Log to stdout and, when log_dir is given, to <log_dir>/<name>_<timestamp>.log."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    log_file = None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = log_dir / f"{name}_{timestamp}.log"
        handlers.insert(0, logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    if log_file is not None:
        logger.info(f"Log file: {log_file}")
    return log_file


@dataclass
class Manifest:
    """Structured record of one deblur run, written as manifest.txt + loss.csv."""
    command: str
    config: Dict[str, Any]
    seed: int
    lam: float
    lambda_source: str
    sigma: Optional[float] = None
    sigma_source: Optional[str] = None
    input_path: str = ''
    outputs: Dict[str, str] = field(default_factory=dict)
    snapshot_files: List[str] = field(default_factory=list)
    loss_file: str = 'loss.csv'
    loss_count: int = 0
    gradient_evaluations: int = 0
    wall_clock: float = 0.0
    status: str = 'ok'
    exit_status: int = EXIT_OK
    message: str = ''

    def items(self) -> Dict[str, Any]:
        entries: Dict[str, Any] = {
            'tool_version': TOOL_VERSION,
            'command': self.command,
            'status': self.status,
            'exit_status': self.exit_status,
            'input': self.input_path,
            'seed': self.seed,
            'lambda': self.lam,
            'lambda_source': self.lambda_source,
            'sigma': self.sigma,
            'sigma_source': self.sigma_source,
            'loss_file': self.loss_file,
            'loss_count': self.loss_count,
            'gradient_evaluations': self.gradient_evaluations,
            'wall_clock_seconds': self.wall_clock,
        }
        entries.update({f"output.{key}": value for key, value in self.outputs.items()})
        entries['snapshots'] = self.snapshot_files
        entries.update(_flatten(self.config, 'config'))
        if self.message:
            entries['message'] = self.message
        return entries

    def write(self, out_dir: Path, report: Optional[RunReport]):
        if report is not None:
            frame = report.loss_frame()
            frame.to_csv(out_dir / self.loss_file, index=False)
            self.loss_count = len(frame)
            self.gradient_evaluations = report.gradient_evaluations
            self.wall_clock = report.wall_clock
        blur_data.write_key_value(out_dir / 'manifest.txt', self.items())


def _flatten(values: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    flat = {}
    for key, value in values.items():
        name = f"{prefix}.{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name))
        else:
            flat[name] = value
    return flat


def _parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _parse_sigma(text: str):
    if text == 'auto':
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sigma takes 'auto' or a number, got '{text}'")
    if value < 0:
        raise argparse.ArgumentTypeError("--sigma must be >= 0")
    return value


def make_tracer(x_gt: np.ndarray, k_gt: Optional[np.ndarray]):
    """Snapshot tracer: aligned kernel MSE and image PSNR against ground truth."""
    border = metrics.border_for_kernel(k_gt.shape[0]) if k_gt is not None else 0

    def trace(image: np.ndarray, kernel: np.ndarray) -> Dict[str, float]:
        values = {}
        if image.shape == x_gt.shape:
            values['psnr'] = metrics.psnr(image, x_gt, align=True, border_crop=border)
        if k_gt is not None:
            values['kernel_mse'] = metrics.kernel_mse_aligned(kernel, k_gt)
        return values

    return trace


def _image_suffix(input_path: Path, channels: int) -> str:
    return '.pfmx' if input_path.suffix.lower() == '.pfmx' else blur_data.image_suffix(channels)


def _write_outputs(report: RunReport, out_dir: Path, suffix: str, manifest: Manifest):
    image_path = out_dir / f"image_estimate{suffix}"
    kernel_path = out_dir / "kernel_estimate.txt"
    kernel_view = out_dir / "kernel_estimate.pgm"
    blur_data.write_image(image_path, report.image)
    blur_data.write_kernel(kernel_path, report.kernel)
    blur_data.write_image(kernel_view, blur_data.kernel_visualization(report.kernel))
    manifest.outputs.update(image=image_path.name, kernel=kernel_path.name, kernel_view=kernel_view.name)

    snapshot_dir = out_dir / "snapshots"
    if report.snapshots:
        snapshot_dir.mkdir(exist_ok=True)
    for t, snap in sorted(report.snapshots.items()):
        x_file = snapshot_dir / f"x_t{t:05d}{suffix}"
        k_file = snapshot_dir / f"k_t{t:05d}.txt"
        blur_data.write_image(x_file, snap.image)
        blur_data.write_kernel(k_file, snap.kernel)
        manifest.snapshot_files += [str(x_file.relative_to(out_dir)), str(k_file.relative_to(out_dir))]
    trace = report.trace_frame()
    if not trace.empty:
        trace.to_csv(out_dir / "trace.csv", index=False)
        manifest.outputs['trace'] = 'trace.csv'


def cmd_deblur(args) -> int:
    out_dir = Path(args.out_dir)
    setup_logging(out_dir, args.verbose)
    logger.info("=" * 60)
    logger.info("Zero-shot blind deconvolution")
    logger.info("=" * 60)

    input_path = Path(args.input)
    y = blur_data.read_image(input_path)
    kernel_fixed = blur_data.read_kernel(args.kernel) if args.kernel else None
    if args.mode == 'fixed-kernel' and kernel_fixed is None:
        raise ConfigurationError("--mode fixed-kernel needs --kernel <file>")
    kernel_size = kernel_fixed.shape[0] if kernel_fixed is not None else args.kernel_size
    if kernel_size is None and not args.config:
        raise ConfigurationError("--kernel-size is required")

    cfg = resolve_run_config(args, kernel_size)
    lam, lambda_source, sigma, sigma_source = choose_lambda(args, y)
    cfg = replace(cfg, lam=lam)
    logger.info(f"Input {input_path} ({y.shape[0]}x{y.shape[1]}x{y.shape[2]}), K={cfg.kernel_size}, "
                f"mode={cfg.mode}, sigma={sigma:.5f} ({sigma_source}), lambda={lam:.3e} ({lambda_source})")

    tracer = None
    if args.ground_truth:
        x_gt = blur_data.read_image(args.ground_truth)
        k_gt = blur_data.read_kernel(args.kernel_gt) if args.kernel_gt else None
        tracer = make_tracer(x_gt, k_gt)

    manifest = Manifest(command='deblur', config=cfg.to_dict(), seed=cfg.seed, lam=lam,
                        lambda_source=lambda_source, sigma=sigma, sigma_source=sigma_source,
                        input_path=str(input_path))
    try:
        report = solver.run(y, cfg, k_fixed=kernel_fixed, tracer=tracer)
    except DivergenceError as e:
        manifest.status, manifest.exit_status, manifest.message = 'diverged', EXIT_DIVERGED, str(e)
        manifest.write(out_dir, e.partial_report)
        logger.error(f"❌ Diverged at iteration {e.iteration}; partial manifest in {out_dir}")
        return EXIT_DIVERGED

    _write_outputs(report, out_dir, _image_suffix(input_path, y.shape[0]), manifest)
    manifest.write(out_dir, report)
    final = report.final_loss
    logger.info(f"✅ Done in {report.wall_clock:.1f}s - final loss {final.total:.6e} "
                f"(fidelity {final.fidelity:.6e}, tv {final.tv:.6e})")
    logger.info(f"Results written to {out_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    setup_logging(out_dir, args.verbose, name="synth")
    x_gt = blur_data.read_image(args.input)
    if args.kernel:
        k_gt = blur_data.read_kernel(args.kernel)
    else:
        spec = blur_data.SynthSpec(kernel_size=args.kernel_size, walk_steps=args.walk_steps,
                                   step_std=args.step_std, sigma=args.sigma, seed=args.seed)
        k_gt = blur_data.gen_kernel_randomwalk(spec)
    pair = blur_data.synth_blur(x_gt, k_gt, args.sigma, args.seed, name=out_dir.name)
    blur_data.save_pair(pair, out_dir, args.image_format)
    logger.info(f"✅ Synthesized pair: K={pair.kernel_size}, sigma={pair.sigma}, seed={pair.seed}, "
                f"y {pair.y.shape[1]}x{pair.y.shape[2]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else None
    setup_logging(out_dir, args.verbose, name="eval")
    restored = blur_data.read_image(args.restored)
    x_gt = blur_data.read_image(args.ground_truth)
    k_est = blur_data.read_kernel(args.kernel_est, check=False) if args.kernel_est else None
    k_gt = blur_data.read_kernel(args.kernel_gt) if args.kernel_gt else None

    report = metrics.evaluate_restoration(restored, x_gt, k_est, k_gt)
    if args.error_ratio:
        if k_est is None or k_gt is None or not args.blurry:
            raise ConfigurationError("--error-ratio needs --blurry, --kernel-est and --kernel-gt")
        y = blur_data.read_image(args.blurry)
        size = max(k_est.shape[0], k_gt.shape[0])
        cfg = resolve_run_config(args, size)
        lam, _, _, _ = choose_lambda(args, y)
        cfg = replace(cfg, lam=lam)
        report.error_ratio = metrics.error_ratio(y, k_est, k_gt, x_gt, cfg)

    values = {key: value for key, value in report.to_dict().items() if value is not None}
    print("=" * 60)
    print("RESTORATION METRICS")
    print("=" * 60)
    for key, value in values.items():
        print(f"{key} = {blur_data.format_value(value)}")
    if out_dir is not None:
        blur_data.write_key_value(out_dir / 'metrics.txt', values)
        logger.info(f"Metrics written to {out_dir / 'metrics.txt'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    out_dir = Path(args.out_dir)
    setup_logging(out_dir, args.verbose, name="bench")
    runner = BenchRunner(args, out_dir)
    return runner.run()


def cmd_verify(args, extra_cases: Sequence[GradcheckCase] = ()) -> int:
    out_dir = Path(args.out_dir) if getattr(args, 'out_dir', None) else None
    setup_logging(out_dir, args.verbose, name="verify")
    started = time.perf_counter()
    results = run_verification(args.suite, extra_cases)

    print("=" * 60)
    print("VERIFICATION SUMMARY")
    print("=" * 60)
    for name, result in results.items():
        marker = "✅" if result.passed else "❌"
        print(f"{marker} {name}: {result.checks} checks in {result.seconds:.1f}s")
        for failure in result.failures:
            print(f"   - {failure}")
    passed = all(r.passed for r in results.values())
    print(f"\n{'✅ All suites passed' if passed else '❌ Verification failed'} "
          f"({time.perf_counter() - started:.1f}s)")
    return EXIT_OK if passed else EXIT_VERIFY_FAILED


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--verbose", action="store_true", help="Debug-level logging")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")


def _add_run_options(parser: argparse.ArgumentParser):
    parser.add_argument("--preset", choices=('full', 'desk'), default=None,
                        help="Network/schedule scale (default: full)")
    parser.add_argument("--config", help="JSON configuration file (see config_setup.py)")
    parser.add_argument("--iters", type=int, help="Iterations T")
    parser.add_argument("--lr", type=float, help="Initial learning rate")
    parser.add_argument("--seed", type=int, help="Seed for noise inputs and initialization (default: 0)")
    parser.add_argument("--sigma", type=_parse_sigma, default='auto',
                        help="Noise level: 'auto' (wavelet estimate) or a number")
    parser.add_argument("--lambda", dest="lam", type=float, help="TV weight (overrides 0.1*sigma)")
    parser.add_argument("--deterministic", action="store_true", help="Fixed-order reductions, bitwise reproducible")
    parser.add_argument("--fft", action="store_true", help="FFT convolution in the blur model")
    parser.add_argument("--gk-variant", choices=('no_hidden', 'one_hidden', 'two_hidden', 'skip_net'),
                        help="Kernel generator architecture")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Zero-shot blind deconvolution with two generator networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deblur", help="Estimate kernel and sharp image from a blurry image")
    p.add_argument("--input", required=True, help="Blurry image (PGM/PPM/PFMX)")
    p.add_argument("--out-dir", required=True, help="Output directory")
    p.add_argument("--kernel-size", type=int, help="Odd kernel size K")
    p.add_argument("--mode", choices=('joint', 'alternating', 'fixed-kernel'), default=None,
                   help="Optimization scheme (default: joint)")
    p.add_argument("--kernel", help="Kernel file for --mode fixed-kernel")
    p.add_argument("--snapshot-iters", type=_parse_int_list, help="Comma-separated snapshot iterations")
    p.add_argument("--ground-truth", help="Sharp image for tracing PSNR at snapshots")
    p.add_argument("--kernel-gt", help="Ground-truth kernel for tracing kernel MSE at snapshots")
    _add_run_options(p)
    _add_common(p)

    p = sub.add_parser("synth", help="Synthesize a blurred pair from a sharp image")
    p.add_argument("--input", required=True, help="Sharp image")
    p.add_argument("--out-dir", required=True, help="Pair directory to write")
    p.add_argument("--kernel-size", type=int, default=7, help="Odd kernel size (default: 7)")
    p.add_argument("--kernel", help="Use this kernel file instead of a random walk")
    p.add_argument("--walk-steps", type=int, default=16, help="Random-walk steps (0 gives a delta kernel)")
    p.add_argument("--step-std", type=float, default=0.5, help="Random-walk step deviation in pixels")
    p.add_argument("--sigma", type=float, default=0.0, help="Noise standard deviation")
    p.add_argument("--seed", type=int, default=0, help="Seed for kernel and noise")
    p.add_argument("--image-format", choices=('pnm', 'pfmx'), default='pfmx',
                   help="8-bit PGM/PPM or lossless PFMX (default: pfmx)")
    _add_common(p)

    p = sub.add_parser("eval", help="Score a restoration against ground truth")
    p.add_argument("--restored", required=True, help="Restored image")
    p.add_argument("--ground-truth", required=True, help="Ground-truth sharp image")
    p.add_argument("--kernel-est", help="Estimated kernel")
    p.add_argument("--kernel-gt", help="Ground-truth kernel")
    p.add_argument("--blurry", help="Blurry observation (needed for --error-ratio)")
    p.add_argument("--error-ratio", action="store_true", help="Run both fixed-kernel restorations")
    p.add_argument("--out-dir", help="Directory for metrics.txt")
    _add_run_options(p)
    _add_common(p)

    p = sub.add_parser("bench", help="Run every pair of a dataset directory")
    p.add_argument("--dataset", required=True, help="Directory of pair directories")
    p.add_argument("--out-dir", required=True, help="Output directory")
    p.add_argument("--mode", choices=('joint', 'alternating', 'fixed-kernel', 'both', 'all-gk'), default='joint',
                   help="joint/alternating/fixed-kernel (known kernel), both, or every G_k variant")
    p.add_argument("--error-ratio", action="store_true", help="Also compute the Error Ratio per run")
    p.add_argument("--snapshot-iters", type=_parse_int_list, help="Comma-separated snapshot iterations")
    _add_run_options(p)
    _add_common(p)

    p = sub.add_parser("verify", help="Run the property suites")
    p.add_argument("--suite", action="append", choices=SUITES, help="Run only this suite (repeatable)")
    p.add_argument("--out-dir", help="Directory for the verification log")
    _add_common(p)
    return parser


COMMANDS = {'deblur': cmd_deblur, 'synth': cmd_synth, 'eval': cmd_eval, 'bench': cmd_bench, 'verify': cmd_verify}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        logger.error(f"❌ {e}")
        return EXIT_DIVERGED
    except DeblurError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_status
    except OSError as e:
        logger.error(f"❌ I/O error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
