"""
Dataset sweep for the `bench` command.

Runs the configured optimization scheme on every pair of a dataset directory
(pairs in parallel, one run per worker), scores each run and writes bench.csv:
one row per pair, one column group per scheme, and a closing 'mean' row.
"""

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

import blur_data
import metrics
import solver
import tensor_autodiff as ad
from config_setup import choose_lambda, resolve_run_config
from deblur_errors import DeblurError, DivergenceError
from generators import GK_VARIANTS
from solver import RunConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "SELFDEBLUR_THREADS"
BENCH_FILE = "bench.csv"
SUMMARY_ROW = "mean"

BENCH_METRICS = ('psnr', 'ssim', 'kernel_mse', 'error_ratio', 'final_total', 'runtime_s', 'status')
BASELINE_METRICS = ('psnr_blurry', 'kernel_mse_delta')


@dataclass
class BenchTask:
    pair: blur_data.DatasetPair
    group: str
    cfg: RunConfig


class BenchStatistics:
    """Thread-safe run counters with a periodic progress banner"""

    def __init__(self):
        self.start_time = datetime.now()
        self.stats = {
            'pairs_found': 0,
            'runs_planned': 0,
            'runs_completed': 0,
            'runs_failed': 0,
            'runs_diverged': 0,
        }
        self.active: Dict[str, datetime] = {}
        self.finished: List[str] = []
        self.lock = threading.Lock()

    def start_run(self, run_id: str):
        with self.lock:
            self.active[run_id] = datetime.now()

    def complete_run(self, run_id: str, status: str = 'ok'):
        with self.lock:
            self.active.pop(run_id, None)
            self.finished.append(run_id)
            if status == 'ok':
                self.stats['runs_completed'] += 1
            elif status == 'diverged':
                self.stats['runs_diverged'] += 1
            else:
                self.stats['runs_failed'] += 1

    def display_progress(self):
        with self.lock:
            elapsed = (datetime.now() - self.start_time).total_seconds()
            done = self.stats['runs_completed'] + self.stats['runs_failed'] + self.stats['runs_diverged']
            print("\n" + "=" * 60)
            print(f"📊 BENCH PROGRESS - {done}/{self.stats['runs_planned']} runs")
            print("=" * 60)
            print(f"⏱️  Runtime: {self._format_duration(elapsed)}")
            print(f"   ├─ ✅ Completed: {self.stats['runs_completed']}")
            print(f"   ├─ ⚠️  Diverged: {self.stats['runs_diverged']}")
            print(f"   └─ ❌ Failed: {self.stats['runs_failed']}")
            for run_id, started in self.active.items():
                running = (datetime.now() - started).total_seconds()
                print(f"🔄 Running: {run_id} ({self._format_duration(running)})")
            if self.finished:
                print(f"✅ Recently finished: {', '.join(self.finished[-3:])}")
            print("=" * 60)

    def _format_duration(self, seconds):
        if seconds < 60:
            return f"{seconds:.1f}s"
        elif seconds < 3600:
            return f"{seconds/60:.1f}m"
        else:
            hours = seconds // 3600
            minutes = (seconds % 3600) // 60
            return f"{hours:.0f}h {minutes:.0f}m"

    def save_final_report(self, out_dir: Path) -> Path:
        with self.lock:
            end_time = datetime.now()
            duration = (end_time - self.start_time).total_seconds()
            report = {
                'bench_summary': {
                    'start_time': self.start_time.isoformat(),
                    'end_time': end_time.isoformat(),
                    'total_duration_seconds': duration,
                    'total_duration_formatted': self._format_duration(duration),
                },
                'statistics': self.stats.copy(),
                'run_order': self.finished.copy(),
            }
        report_file = out_dir / "bench_report.json"
        with open(report_file, 'w', encoding='utf-8') as f:
            json.dump(report, f, indent=2, default=str)
        return report_file


class ProgressDisplayThread(threading.Thread):
    """Background thread printing the bench banner every update_interval seconds"""

    def __init__(self, stats_tracker: BenchStatistics, update_interval: float = 30):
        super().__init__(daemon=True)
        self.stats_tracker = stats_tracker
        self.update_interval = update_interval
        self.stop_event = threading.Event()

    def run(self):
        while not self.stop_event.wait(self.update_interval):
            self.stats_tracker.display_progress()

    def stop(self):
        self.stop_event.set()


class BenchTable:
    """Long per-run rows pivoted to one row per pair plus a mean row."""

    def __init__(self, groups: List[str]):
        self.groups = list(groups)
        self.rows: List[Dict[str, Any]] = []
        self.baselines: Dict[str, Dict[str, float]] = {}

    def add(self, pair: str, group: str, values: Dict[str, Any]):
        self.rows.append(dict(values, pair=pair, group=group))

    def add_baseline(self, pair: str, values: Dict[str, float]):
        self.baselines[pair] = dict(values)

    def columns(self) -> List[str]:
        cols = [f"{group}_{metric}" for group in self.groups for metric in BENCH_METRICS]
        return cols + list(BASELINE_METRICS)

    def to_frame(self) -> pd.DataFrame:
        long = pd.DataFrame(self.rows, columns=['pair', 'group', *BENCH_METRICS])
        wide = long.pivot(index='pair', columns='group', values=list(BENCH_METRICS))
        wide.columns = [f"{group}_{metric}" for metric, group in wide.columns]
        baselines = pd.DataFrame.from_dict(self.baselines, orient='index', columns=list(BASELINE_METRICS))
        wide = wide.join(baselines).reindex(columns=self.columns()).sort_index()

        numeric = [c for c in wide.columns if not c.endswith('_status')]
        wide[numeric] = wide[numeric].apply(pd.to_numeric, errors='coerce')
        summary = wide[numeric].mean(axis=0)
        wide.loc[SUMMARY_ROW] = summary
        wide.index.name = 'pair'
        return wide

    def write(self, path: Path) -> pd.DataFrame:
        frame = self.to_frame()
        frame.to_csv(path)
        return frame


def worker_count(tasks: int) -> int:
    """SELFDEBLUR_THREADS caps the pool; default one worker per CPU."""
    limit = os.environ.get(THREADS_ENV)
    try:
        cap = int(limit) if limit else (os.cpu_count() or 1)
    except ValueError:
        logger.warning(f"Ignoring non-integer {THREADS_ENV}={limit!r}")
        cap = os.cpu_count() or 1
    return max(1, min(cap, tasks))


def blurry_baseline(pair: blur_data.DatasetPair) -> Dict[str, float]:
    """Scores of doing nothing: the blurry image as restoration and a delta as kernel."""
    K = pair.kernel_size
    border = metrics.border_for_kernel(K)
    x_ref = metrics.center_crop(pair.x_gt, pair.y.shape[-2:])
    return {
        'psnr_blurry': metrics.psnr(pair.y, x_ref, align=True, border_crop=border),
        'kernel_mse_delta': metrics.kernel_mse_aligned(blur_data.delta_kernel(K), pair.k_gt),
    }


class BenchRunner:
    """Plans, runs and tabulates the bench sweep for one `bench` invocation."""

    def __init__(self, args, out_dir: Path):
        self.args = args
        self.out_dir = Path(out_dir)
        self.stats = BenchStatistics()

    def plan_groups(self, base: RunConfig) -> Dict[str, RunConfig]:
        mode = self.args.mode
        if mode == 'both':
            return {'joint': base.with_mode('joint'), 'alternating': base.with_mode('alternating')}
        if mode == 'all-gk':
            return {f"gk_{variant}": replace(base.with_mode('joint'), gk=replace(base.gk, depth_variant=variant))
                    for variant in GK_VARIANTS}
        if mode == 'fixed-kernel':
            return {'known_k': base.with_mode('fixed_kernel')}
        return {mode: base.with_mode(mode)}

    def _pair_config(self, pair: blur_data.DatasetPair) -> RunConfig:
        cfg = resolve_run_config(self.args, pair.kernel_size)
        lam, source, sigma, _ = choose_lambda(self.args, pair.y, pair.sigma)
        logger.info(f"{pair.name}: K={pair.kernel_size}, sigma={sigma:.5f}, lambda={lam:.3e} ({source})")
        return replace(cfg, lam=lam)

    def run_task(self, task: BenchTask) -> Dict[str, Any]:
        pair, cfg = task.pair, task.cfg
        run_id = f"{pair.name}/{task.group}"
        self.stats.start_run(run_id)
        values: Dict[str, Any] = {metric: np.nan for metric in BENCH_METRICS}
        started = time.perf_counter()
        try:
            if cfg.mode == 'fixed_kernel':
                report = solver.run_fixed_kernel(pair.y, pair.k_gt, cfg)
            else:
                report = solver.run(pair.y, cfg)
            scores = metrics.evaluate_restoration(report.image, pair.x_gt, report.kernel, pair.k_gt)
            values.update(psnr=scores.psnr, ssim=scores.ssim, kernel_mse=scores.kernel_mse_aligned,
                          final_total=report.final_loss.total, status='ok')
            if self.args.error_ratio:
                values['error_ratio'] = metrics.error_ratio(pair.y, report.kernel, pair.k_gt, pair.x_gt, cfg)
        except DivergenceError as e:
            logger.error(f"❌ {run_id} diverged at iteration {e.iteration}")
            values['status'] = 'diverged'
        except DeblurError as e:
            logger.error(f"❌ {run_id} failed: {type(e).__name__}: {e}")
            values['status'] = 'failed'
        except Exception as e:
            logger.exception(f"❌ {run_id} failed with an unexpected error: {type(e).__name__}: {e}")
            values['status'] = 'failed'
        values['runtime_s'] = time.perf_counter() - started
        self.stats.complete_run(run_id, values['status'])
        logger.info(f"{run_id}: status={values['status']} psnr={values['psnr']:.3f} "
                    f"runtime={values['runtime_s']:.1f}s")
        return values

    def run(self) -> int:
        logger.info("=" * 60)
        logger.info("Blind deconvolution bench")
        logger.info("=" * 60)
        pair_dirs = blur_data.list_pairs(self.args.dataset)
        if not pair_dirs:
            logger.error(f"❌ No pairs (directories with k_gt.txt) in {self.args.dataset}")
            return 2
        pairs = [blur_data.load_pair(d) for d in pair_dirs]
        self.stats.stats['pairs_found'] = len(pairs)

        table: Optional[BenchTable] = None
        tasks: List[BenchTask] = []
        for pair in pairs:
            groups = self.plan_groups(self._pair_config(pair))
            table = table or BenchTable(list(groups))
            tasks += [BenchTask(pair, group, cfg) for group, cfg in groups.items()]
            table.add_baseline(pair.name, blurry_baseline(pair))
        self.stats.stats['runs_planned'] = len(tasks)

        # the deterministic flag is process-wide; fix it before workers start
        previous = ad.is_deterministic()
        if tasks[0].cfg.deterministic:
            ad.set_deterministic(True)
        workers = worker_count(len(tasks))
        logger.info(f"{len(pairs)} pairs, {len(tasks)} runs, {workers} workers")

        progress_thread = ProgressDisplayThread(self.stats, update_interval=30)
        progress_thread.start()
        try:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(self.run_task, task): task for task in tasks}
                for future in as_completed(futures):
                    task = futures[future]
                    table.add(task.pair.name, task.group, future.result())
        finally:
            progress_thread.stop()
            progress_thread.join(timeout=2)
            ad.set_deterministic(previous)

        self.out_dir.mkdir(parents=True, exist_ok=True)
        frame = table.write(self.out_dir / BENCH_FILE)
        report_file = self.stats.save_final_report(self.out_dir)
        self._log_summary(frame, table.groups)
        logger.info(f"Bench table: {self.out_dir / BENCH_FILE}")
        logger.info(f"Run report: {report_file}")

        if self.stats.stats['runs_diverged']:
            return 3
        return 2 if self.stats.stats['runs_failed'] else 0

    def _log_summary(self, frame: pd.DataFrame, groups: List[str]):
        summary = frame.loc[SUMMARY_ROW]
        logger.info("=" * 60)
        logger.info("BENCH SUMMARY (means over pairs)")
        logger.info("=" * 60)
        for group in groups:
            logger.info(f"{group}: PSNR {summary[f'{group}_psnr']:.3f}  SSIM {summary[f'{group}_ssim']:.4f}  "
                        f"kernel MSE {summary[f'{group}_kernel_mse']:.3e}  "
                        f"total {summary[f'{group}_final_total']:.6e}  "
                        f"time {summary[f'{group}_runtime_s']:.1f}s")
        logger.info(f"blurry input: PSNR {summary['psnr_blurry']:.3f}, "
                    f"delta kernel MSE {summary['kernel_mse_delta']:.3e}")
        s = self.stats.stats
        marker = "✅" if s['runs_completed'] == s['runs_planned'] else "❌"
        logger.info(f"{marker} {s['runs_completed']}/{s['runs_planned']} runs completed, "
                    f"{s['runs_diverged']} diverged, {s['runs_failed']} failed")
