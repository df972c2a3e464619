#!/usr/bin/env python3
"""
Tests for the ADAM solver: schedule, update rule and the three run modes
"""

import sys
from pathlib import Path

import numpy as np

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))

import metrics
import solver
import tensor_autodiff as ad
from bench_runner import blurry_baseline
from blur_data import SynthSpec, delta_kernel, gen_kernel_randomwalk, synth_blur
from deblur_errors import ConfigurationError, ContractViolation, DivergenceError
from generators import GkConfig, GxConfig
from solver import AdamState, RunConfig, adam_step, lr_at
from tensor_autodiff import ParamStore


def _tiny_config(**overrides) -> RunConfig:
    values = dict(
        iterations=20, milestones=(10,), snapshot_iters=(1, 20), lam=1e-4, precision='double',
        gx=GxConfig(levels=2, channels_down=[4, 4], channels_up=[4, 4], channels_skip=[2, 2], input_channels=4),
        gk=GkConfig(kernel_size=3, z_dim=8, hidden_dim=16),
    )
    values.update(overrides)
    return RunConfig(**values)


def _observation(seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.2, 0.8, (1, 10, 10))


def test_learning_rate_schedule():
    cfg = RunConfig.full(kernel_size=3)
    assert lr_at(1, cfg) == 0.01 and lr_at(1999, cfg) == 0.01
    assert lr_at(2000, cfg) == 0.005
    assert lr_at(3000, cfg) == 0.0025
    assert lr_at(4000, cfg) == 0.00125 and lr_at(5000, cfg) == 0.00125
    try:
        lr_at(0, cfg)
        raise AssertionError("iteration 0 accepted")
    except ContractViolation:
        pass


def test_presets():
    full = RunConfig.full(kernel_size=31)
    assert full.iterations == 5000 and full.milestones == (2000, 3000, 4000)
    assert full.snapshot_iters == (1, 20, 100, 600, 2000, 5000)
    assert full.mode == 'joint' and full.seed == 0 and full.lr0 == 0.01
    desk = RunConfig.desk(kernel_size=7)
    assert desk.iterations == 1500 and desk.milestones == (600, 900, 1200)
    assert desk.snapshot_iters == (1, 20, 100, 600, 1500)
    assert desk.gx.levels == 3 and desk.kernel_size == 7
    assert desk.gk.z_dim == 64 and desk.gk.hidden_dim == 256
    assert full.gk.z_dim == 200 and full.gk.hidden_dim == 1000


def test_run_config_validation():
    bad = [
        dict(milestones=(30,)),
        dict(milestones=(10, 5)),
        dict(mode='sideways'),
        dict(snapshot_iters=(0,)),
        dict(lam=-1.0),
        dict(precision='half'),
    ]
    for values in bad:
        try:
            _tiny_config(**values)
            raise AssertionError(f"invalid config accepted: {values}")
        except ConfigurationError:
            pass


def test_adam_first_step_moves_by_lr():
    params = ParamStore(np.float64)
    params.add('w', [1.0, -1.0, 0.5])
    state = AdamState.for_params(params)
    adam_step(params, {'w': np.array([2.0, -0.5, 1e-3])}, state, lr=0.1)
    np.testing.assert_allclose(params['w'], [0.9, -0.9, 0.4], atol=1e-5)
    assert state.t == 1


def test_adam_rejects_non_finite_gradient():
    params = ParamStore(np.float64)
    params.add('w', [1.0])
    state = AdamState.for_params(params)
    try:
        adam_step(params, {'w': np.array([np.nan])}, state, lr=0.1)
        raise AssertionError("NaN gradient accepted")
    except DivergenceError:
        pass
    assert params['w'][0] == 1.0 and state.t == 0


def test_joint_run_report():
    cfg = _tiny_config()
    report = solver.run_joint(_observation(), cfg)
    assert report.status == 'ok' and report.mode == 'joint'
    assert len(report.losses) == cfg.iterations
    assert report.gradient_evaluations == cfg.iterations
    assert report.image.shape == (1, 12, 12)
    assert report.image.min() >= 0 and report.image.max() <= 1
    assert report.kernel.shape == (3, 3) and report.kernel.min() >= 0
    assert abs(report.kernel.sum() - 1.0) < 1e-6
    assert sorted(report.snapshots) == [1, 20]
    for b in report.losses:
        assert b.total == b.fidelity + b.lam * b.tv
    assert min(b.total for b in report.losses[-5:]) < report.losses[0].total
    frame = report.loss_frame()
    assert list(frame.columns) == ['iteration', 'fidelity', 'tv', 'lambda', 'total']
    assert len(frame) == cfg.iterations


def test_alternating_run_evaluates_twice_per_iteration():
    cfg = _tiny_config(iterations=6, milestones=(), snapshot_iters=())
    report = solver.run_alternating(_observation(1), cfg)
    assert report.mode == 'alternating'
    assert len(report.losses) == 6
    assert report.gradient_evaluations == 12


def test_fixed_kernel_run_keeps_kernel():
    k = np.array([[0.0, 0.1, 0.0], [0.2, 0.4, 0.2], [0.0, 0.1, 0.0]])
    cfg = _tiny_config(iterations=5, milestones=(), snapshot_iters=(5,))
    report = solver.run_fixed_kernel(_observation(2), k, cfg)
    assert report.mode == 'fixed_kernel'
    np.testing.assert_allclose(report.kernel, k)
    np.testing.assert_allclose(report.snapshots[5].kernel, k)
    assert report.gradient_evaluations == 5


def test_fixed_kernel_rejects_off_simplex_kernel():
    try:
        solver.run_fixed_kernel(_observation(), np.full((3, 3), 0.2), _tiny_config(iterations=2, milestones=()))
        raise AssertionError("kernel summing to 1.8 accepted")
    except ContractViolation:
        pass


def test_run_dispatch_needs_kernel_for_fixed_mode():
    cfg = _tiny_config(mode='fixed_kernel', iterations=2, milestones=(), snapshot_iters=())
    try:
        solver.run(_observation(), cfg)
        raise AssertionError("fixed_kernel without a kernel accepted")
    except ConfigurationError:
        pass


def test_deterministic_runs_are_bitwise_identical():
    cfg = _tiny_config(iterations=8, milestones=(4,), snapshot_iters=(), deterministic=True, precision='single')
    a = solver.run_joint(_observation(3), cfg)
    b = solver.run_joint(_observation(3), cfg)
    assert a.kernel.tobytes() == b.kernel.tobytes()
    assert a.image.tobytes() == b.image.tobytes()
    assert [l.total for l in a.losses] == [l.total for l in b.losses]


def test_seed_changes_result():
    a = solver.run_joint(_observation(), _tiny_config(iterations=3, milestones=(), snapshot_iters=(), seed=0))
    b = solver.run_joint(_observation(), _tiny_config(iterations=3, milestones=(), snapshot_iters=(), seed=1))
    assert not np.array_equal(a.kernel, b.kernel)


def test_divergence_carries_partial_report():
    y = _observation()
    y[0, 3, 3] = np.nan
    try:
        solver.run_joint(y, _tiny_config(iterations=4, milestones=(), snapshot_iters=()))
        raise AssertionError("NaN observation did not diverge")
    except DivergenceError as e:
        assert e.iteration == 1
        assert e.exit_status == 3
        assert e.partial_report is not None and e.partial_report.status == 'diverged'


def test_tracer_values_recorded_at_snapshots():
    calls = []

    def tracer(image, kernel):
        calls.append(image.shape)
        return {'kernel_peak': float(kernel.max())}

    report = solver.run_joint(_observation(), _tiny_config(iterations=4, milestones=(), snapshot_iters=(2, 4)),
                              tracer=tracer)
    assert calls == [(1, 12, 12), (1, 12, 12)]
    trace = report.trace_frame()
    assert list(trace['iteration']) == [2, 4]
    assert 'kernel_peak' in trace.columns


def _shapes_image(seed=0, size=16):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.3 + 0.3 * xx / size
    for _ in range(3):
        cy, cx = rng.uniform(3, size - 3, 2)
        r = rng.uniform(2, size / 3)
        img[(np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)] = rng.uniform(0.1, 0.9)
    return img[None]


def test_joint_step_checks_both_gradients_before_stepping():
    def nan_gradient(a):
        return ad._record('nan_gradient', a.data, (a,), lambda g, needs: (np.full_like(g, np.nan),))

    cfg = _tiny_config(iterations=3, milestones=(), snapshot_iters=())
    y = _observation(4)
    gx, gk = solver.build_generators(y.shape, cfg)
    forward_k = gk.forward_fn
    gk.forward_fn = lambda p, z: nan_gradient(forward_k(p, z))
    gx_before = gx.params.copy()
    try:
        solver.run_joint(y, cfg, gx, gk)
        raise AssertionError("NaN kernel gradient did not diverge")
    except DivergenceError as e:
        assert e.iteration == 1
        assert e.partial_report.status == 'diverged'
    for name in gx.params.names():
        assert np.array_equal(gx.params[name], gx_before[name]), name


def test_alternating_half_steps_touch_one_network_each():
    cfg = _tiny_config(iterations=2, milestones=(), snapshot_iters=())
    y = _observation(5)
    gx, gk = solver.build_generators(y.shape, cfg)
    events = []
    original = solver.adam_step

    def recording_step(params, grads, state, lr):
        before = (gx.params.copy(), gk.params.copy())
        result = original(params, grads, state, lr)
        events.append(('gx' if params is gx.params else 'gk', before, (gx.params.copy(), gk.params.copy())))
        return result

    def same(a, b):
        return all(np.array_equal(a[n], b[n]) for n in a.names())

    solver.adam_step = recording_step
    try:
        solver.run_alternating(y, cfg, gx, gk)
    finally:
        solver.adam_step = original
    assert [kind for kind, _, _ in events] == ['gk', 'gx', 'gk', 'gx']
    for kind, (x_before, k_before), (x_after, k_after) in events:
        if kind == 'gk':
            assert same(x_before, x_after) and not same(k_before, k_after)
        else:
            assert same(k_before, k_after) and not same(x_before, x_after)
    # each half-step starts from the other half's result
    for (_, _, after), (_, before, _) in zip(events, events[1:]):
        assert same(after[0], before[0]) and same(after[1], before[1])


def _convergence_config(**overrides) -> RunConfig:
    values = dict(iterations=500, milestones=(200, 300, 400), snapshot_iters=(), lam=0.0)
    values.update(overrides)
    return RunConfig.desk(3, **values)


def test_joint_fits_unblurred_instance():
    pair = synth_blur(_shapes_image(0), delta_kernel(3), sigma=0.0, seed=0)
    report = solver.run_joint(pair.y, _convergence_config())
    assert report.final_loss.fidelity < 1e-3, report.final_loss.fidelity


def test_fixed_delta_kernel_fits_unblurred_observation():
    y = _shapes_image(1)
    report = solver.run_fixed_kernel(y[:, 1:-1, 1:-1], delta_kernel(3), _convergence_config())
    assert report.mode == 'fixed_kernel'
    assert report.final_loss.fidelity < 1e-3, report.final_loss.fidelity


def test_fixed_true_kernel_beats_blurry_input():
    x_gt = _shapes_image(2, size=24)
    k_gt = gen_kernel_randomwalk(SynthSpec(kernel_size=5, walk_steps=12, step_std=0.6, seed=2))
    pair = synth_blur(x_gt, k_gt, sigma=0.0, seed=2)
    report = solver.run_fixed_kernel(pair.y, k_gt, RunConfig.desk(5, iterations=500, milestones=(200, 300, 400),
                                                                 snapshot_iters=(), lam=0.0))
    restored = metrics.evaluate_restoration(report.image, pair.x_gt, report.kernel, pair.k_gt).psnr
    blurry = blurry_baseline(pair)['psnr_blurry']
    assert restored > blurry, (restored, blurry)


TESTS = [
    test_learning_rate_schedule,
    test_presets,
    test_run_config_validation,
    test_adam_first_step_moves_by_lr,
    test_adam_rejects_non_finite_gradient,
    test_joint_run_report,
    test_alternating_run_evaluates_twice_per_iteration,
    test_fixed_kernel_run_keeps_kernel,
    test_fixed_kernel_rejects_off_simplex_kernel,
    test_run_dispatch_needs_kernel_for_fixed_mode,
    test_deterministic_runs_are_bitwise_identical,
    test_seed_changes_result,
    test_divergence_carries_partial_report,
    test_tracer_values_recorded_at_snapshots,
    test_joint_step_checks_both_gradients_before_stepping,
    test_alternating_half_steps_touch_one_network_each,
    test_joint_fits_unblurred_instance,
    test_fixed_delta_kernel_fits_unblurred_observation,
    test_fixed_true_kernel_beats_blurry_input,
]


def main():
    """Run all tests"""
    print("🧪 Solver Test Suite")
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
