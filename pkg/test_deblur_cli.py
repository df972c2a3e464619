#!/usr/bin/env python3
"""
End-to-end tests for the deblur command line: synth, deblur, eval, bench and verify
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))

import blur_data
import deblur_cli
import metrics
import solver
import tensor_autodiff as ad
from bench_runner import SUMMARY_ROW, BenchRunner, BenchTask
from solver import RunConfig
from verification import GradcheckCase

TINY_CONFIG = {
    'preset': 'desk',
    'iterations': 6,
    'milestones': [3],
    'snapshot_iters': [1, 6],
    'precision': 'double',
    'gx': {'levels': 2, 'channels_down': [4, 4], 'channels_up': [4, 4], 'channels_skip': [2, 2],
           'input_channels': 4},
    'gk': {'z_dim': 8, 'hidden_dim': 16},
}


def _write_tiny_config(root: Path, **overrides) -> str:
    path = root / 'tiny.json'
    path.write_text(json.dumps(dict(TINY_CONFIG, **overrides), indent=2))
    return str(path)


def _sharp_image(root: Path, seed=0, size=24) -> Path:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = 0.25 + 0.5 * ((xx > 0.5) ^ (yy > 0.4)) + rng.uniform(-0.05, 0.05, (size, size))
    path = root / f'sharp_{seed}.pfmx'
    blur_data.write_image(path, np.clip(img, 0, 1)[None])
    return path


def _synth(root: Path, name: str, seed=0, extra=()) -> Path:
    out = root / name
    code = deblur_cli.main(['synth', '--input', str(_sharp_image(root, seed)), '--out-dir', str(out),
                            '--kernel-size', '3', '--seed', str(seed), '--no-progress', *extra])
    assert code == 0
    return out


def test_synth_delta_kernel_gives_central_crop():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        out = _synth(root, 'pair', extra=['--walk-steps', '0', '--sigma', '0'])
        pair = blur_data.load_pair(out)
        np.testing.assert_array_equal(pair.k_gt, blur_data.delta_kernel(3))
        np.testing.assert_allclose(pair.y, pair.x_gt[:, 1:-1, 1:-1], atol=1e-15)


def test_synth_is_seeded_and_kernel_reloads():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        a = blur_data.load_pair(_synth(root, 'a', extra=['--sigma', '0.01']))
        b = blur_data.load_pair(_synth(root, 'b', extra=['--sigma', '0.01']))
        assert np.array_equal(a.y, b.y) and np.array_equal(a.k_gt, b.k_gt)
        assert abs(blur_data.read_kernel(root / 'a' / 'k_gt.txt').sum() - 1.0) < 1e-12
        assert a.sigma == 0.01 and a.seed == 0


def _deblur(root: Path, pair_dir: Path, name: str, extra=()) -> int:
    return deblur_cli.main(['deblur', '--input', str(pair_dir / 'y.pfmx'), '--out-dir', str(root / name),
                            '--kernel-size', '3', '--config', _write_tiny_config(root), '--no-progress', *extra])


def test_deblur_writes_manifest_and_outputs():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        pair_dir = _synth(root, 'pair')
        assert _deblur(root, pair_dir, 'run', ['--ground-truth', str(pair_dir / 'x_gt.pfmx'),
                                               '--kernel-gt', str(pair_dir / 'k_gt.txt')]) == 0
        out = root / 'run'
        manifest = blur_data.read_key_value(out / 'manifest.txt')
        assert manifest['status'] == 'ok' and manifest['exit_status'] == '0'
        assert manifest['loss_count'] == '6' and manifest['config.iterations'] == '6'
        assert manifest['lambda_source'] == 'sigma_estimated'

        losses = pd.read_csv(out / 'loss.csv')
        assert list(losses.columns) == ['iteration', 'fidelity', 'tv', 'lambda', 'total']
        assert list(losses['iteration']) == [1, 2, 3, 4, 5, 6]

        kernel = blur_data.read_kernel(out / 'kernel_estimate.txt')
        assert kernel.shape == (3, 3)
        assert blur_data.read_image(out / 'image_estimate.pfmx').shape == (1, 24, 24)
        for t in (1, 6):
            assert (out / 'snapshots' / f'x_t{t:05d}.pfmx').exists()
            assert (out / 'snapshots' / f'k_t{t:05d}.txt').exists()
        trace = pd.read_csv(out / 'trace.csv')
        assert list(trace['iteration']) == [1, 6] and 'psnr' in trace.columns


def test_deterministic_deblur_is_byte_identical():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        pair_dir = _synth(root, 'pair')
        previous = ad.is_deterministic()
        try:
            assert _deblur(root, pair_dir, 'one', ['--deterministic', '--lambda', '1e-4']) == 0
            assert _deblur(root, pair_dir, 'two', ['--deterministic', '--lambda', '1e-4']) == 0
        finally:
            ad.set_deterministic(previous)
        one = (root / 'one' / 'kernel_estimate.txt').read_bytes()
        assert one == (root / 'two' / 'kernel_estimate.txt').read_bytes()
        manifest = blur_data.read_key_value(root / 'one' / 'manifest.txt')
        assert manifest['lambda_source'] == 'user'


def test_fixed_kernel_mode_keeps_kernel():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        pair_dir = _synth(root, 'pair')
        assert _deblur(root, pair_dir, 'known', ['--mode', 'fixed-kernel',
                                                 '--kernel', str(pair_dir / 'k_gt.txt')]) == 0
        np.testing.assert_allclose(blur_data.read_kernel(root / 'known' / 'kernel_estimate.txt'),
                                   blur_data.read_kernel(pair_dir / 'k_gt.txt'), atol=1e-15)
        assert _deblur(root, pair_dir, 'missing', ['--mode', 'fixed-kernel']) == 2


def test_usage_and_input_errors():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        assert deblur_cli.main(['deblur', '--input', str(root / 'nope.pgm'), '--out-dir', str(root / 'o'),
                                '--kernel-size', '3', '--no-progress']) == 2
        assert deblur_cli.main(['deblur', '--out-dir', str(root / 'o')]) == 2
        assert deblur_cli.main(['deblur', '--input', 'y.pgm', '--out-dir', 'o', '--sigma', 'loud']) == 2
        assert deblur_cli.main(['transmogrify']) == 2


def test_eval_of_exact_restoration():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        pair_dir = _synth(root, 'pair')
        out = root / 'scores'
        code = deblur_cli.main(['eval', '--restored', str(pair_dir / 'x_gt.pfmx'),
                                '--ground-truth', str(pair_dir / 'x_gt.pfmx'),
                                '--kernel-est', str(pair_dir / 'k_gt.txt'), '--kernel-gt', str(pair_dir / 'k_gt.txt'),
                                '--out-dir', str(out), '--no-progress'])
        assert code == 0
        values = blur_data.read_key_value(out / 'metrics.txt')
        assert float(values['psnr']) == metrics.PSNR_CEILING
        assert float(values['kernel_mse_aligned']) == 0.0
        assert abs(float(values['ssim']) - 1.0) < 1e-12
        assert 'error_ratio' not in values

        assert deblur_cli.main(['eval', '--restored', str(pair_dir / 'x_gt.pfmx'),
                                '--ground-truth', str(pair_dir / 'x_gt.pfmx'), '--error-ratio']) == 2


def test_bench_table_rows_and_mean():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        dataset = root / 'dataset'
        dataset.mkdir()
        for seed in (0, 1):
            _synth(root, f'dataset/p{seed}', seed=seed, extra=['--sigma', '0.005'])
        out = root / 'bench'
        code = deblur_cli.main(['bench', '--dataset', str(dataset), '--out-dir', str(out), '--mode', 'both',
                                '--config', _write_tiny_config(root), '--error-ratio', '--no-progress'])
        assert code == 0
        frame = pd.read_csv(out / 'bench.csv', index_col='pair')
        assert list(frame.index) == ['p0', 'p1', SUMMARY_ROW]
        for column in ('joint_psnr', 'alternating_psnr', 'joint_error_ratio', 'psnr_blurry', 'kernel_mse_delta'):
            expected = frame.loc[['p0', 'p1'], column].mean()
            assert abs(frame.loc[SUMMARY_ROW, column] - expected) <= 1e-9 * max(1.0, abs(expected)), column
        assert list(frame.loc[['p0', 'p1'], 'joint_status']) == ['ok', 'ok']
        report = json.loads((out / 'bench_report.json').read_text())
        assert report['statistics']['runs_completed'] == 4


def test_bench_on_empty_dataset():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / 'empty').mkdir()
        assert deblur_cli.main(['bench', '--dataset', str(root / 'empty'), '--out-dir', str(root / 'out'),
                                '--no-progress']) == 2
        assert deblur_cli.main(['bench', '--dataset', str(root / 'absent'), '--out-dir', str(root / 'out'),
                                '--no-progress']) == 2


def test_bench_records_unexpected_error_as_failed():
    def broken_run(y, cfg):
        raise RuntimeError("worker crashed")

    rng = np.random.default_rng(3)
    pair = blur_data.synth_blur(rng.uniform(0, 1, (1, 12, 12)), blur_data.delta_kernel(3), sigma=0.0, seed=3,
                                name='p3')
    cfg = RunConfig.desk(3, iterations=4, milestones=(2,), snapshot_iters=())
    original = solver.run
    solver.run = broken_run
    try:
        with tempfile.TemporaryDirectory() as tmp:
            runner = BenchRunner(argparse.Namespace(error_ratio=False, mode='joint'), Path(tmp))
            values = runner.run_task(BenchTask(pair, 'joint', cfg))
    finally:
        solver.run = original
    assert values['status'] == 'failed'
    assert np.isnan(values['psnr']) and values['runtime_s'] >= 0
    assert runner.stats.stats['runs_failed'] == 1 and runner.stats.stats['runs_completed'] == 0


def test_verify_schedule_suite():
    assert deblur_cli.main(['verify', '--suite', 'schedule', '--suite', 'metrics']) == 0


def test_verify_catches_wrong_gradient():
    def bad_square(a):
        # backward off by a sign
        return ad._record('bad_square', a.data * a.data, (a,), lambda g, needs: (-2 * a.data * g,))

    case = GradcheckCase('bad_square', bad_square, lambda rng: [rng.uniform(0.5, 1.5, (3,))], points=2)
    args = argparse.Namespace(suite=['gradcheck'], out_dir=None, verbose=False)
    assert deblur_cli.cmd_verify(args, extra_cases=[case]) == 1


TESTS = [
    test_synth_delta_kernel_gives_central_crop,
    test_synth_is_seeded_and_kernel_reloads,
    test_deblur_writes_manifest_and_outputs,
    test_deterministic_deblur_is_byte_identical,
    test_fixed_kernel_mode_keeps_kernel,
    test_usage_and_input_errors,
    test_eval_of_exact_restoration,
    test_bench_table_rows_and_mean,
    test_bench_on_empty_dataset,
    test_bench_records_unexpected_error_as_failed,
    test_verify_schedule_suite,
    test_verify_catches_wrong_gradient,
]


def main():
    """Run all tests"""
    print("🧪 Command Line Test Suite")
    print("=" * 60)
    failed = []
    for test in TESTS:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            failed.append(test.__name__)
            print(f"❌ {test.__name__}: {type(e).__name__}: {e}")
    print("\n" + "=" * 60)
    if failed:
        print(f"❌ {len(failed)} of {len(TESTS)} tests failed")
        sys.exit(1)
    print(f"🎉 ALL {len(TESTS)} TESTS PASSED")
    sys.exit(0)


if __name__ == "__main__":
    main()
