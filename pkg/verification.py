"""
Property suites behind `deblur_cli.py verify`.

    gradcheck    reverse-mode vs central differences for every op and both generators
    simplex      G_k outputs on the simplex and G_x outputs in [0, 1] under random parameters
    conv_oracle  direct conv2d vs a brute-force loop, FFT path vs direct
    schedule     learning-rate milestones and the noise-adaptive lambda
    metrics      PSNR/SSIM/kernel-MSE anchors
"""

import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

import blur_model
import metrics
import tensor_autodiff as ad
from generators import GkConfig, GxConfig, build_gk, build_gx
from solver import RunConfig, lr_at
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

SUITES = ('gradcheck', 'simplex', 'conv_oracle', 'schedule', 'metrics')

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5
# Absolute floor for whole-network checks: parameters whose true gradient is
# exactly zero (a shift feeding a normalization) still see O(1e-11) roundoff.
NETWORK_FLOOR = 1e-6


@dataclass
class GradcheckCase:
    name: str
    fn: Callable
    make_point: Callable[[np.random.Generator], object]
    points: int = 10
    tolerance: float = GRADCHECK_TOL
    floor: float = 1e-8


@dataclass
class SuiteResult:
    name: str
    passed: bool = True
    checks: int = 0
    failures: List[str] = field(default_factory=list)
    seconds: float = 0.0

    def check(self, ok: bool, message: str):
        self.checks += 1
        if not ok:
            self.passed = False
            self.failures.append(message)


def _signed(rng, shape, low=0.1, high=1.0):
    """Values bounded away from zero (keeps leaky-ReLU kinks out of the difference stencil)."""
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def _tiny_gx_config() -> GxConfig:
    return GxConfig(levels=2, channels_down=[2, 2], channels_up=[2, 2], channels_skip=[1, 1], input_channels=2)


def _normal(shape):
    return lambda rng: [rng.standard_normal(shape)]


def gradcheck_cases() -> List[GradcheckCase]:
    cases = [
        GradcheckCase('add', lambda a, b: ad.add(a, b), lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        GradcheckCase('sub', lambda a, b: ad.sub(a, b), lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        GradcheckCase('mul', lambda a, b: ad.mul(a, b), lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        GradcheckCase('scale', lambda a: ad.scale(a, 1.7), _normal((3, 4))),
        GradcheckCase('square', ad.square, _normal((3, 4))),
        GradcheckCase('sqrt', ad.sqrt, lambda rng: [rng.uniform(0.5, 2.0, (3, 4))]),
        GradcheckCase('sum_all', ad.sum_all, _normal((3, 4))),
        GradcheckCase('mean_all', ad.mean_all, _normal((3, 4))),
        GradcheckCase('reshape', lambda a: ad.reshape(a, (6, 2)), _normal((3, 4))),
        GradcheckCase('concat', lambda a, b: ad.concat([a, b]),
                      lambda rng: [rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 3, 4))]),
        GradcheckCase('crop2d', lambda a: ad.crop2d(a, 1, 2, 3, 3), _normal((2, 5, 6))),
        GradcheckCase('select_channels', lambda a: ad.select_channels(a, 1, 3), _normal((3, 4, 4))),
        GradcheckCase('flip2d', ad.flip2d, _normal((2, 3, 4))),
        GradcheckCase('conv2d_valid', lambda x, w: ad.conv2d(x, w),
                      lambda rng: [rng.standard_normal((2, 6, 7)), rng.standard_normal((3, 2, 3, 3))]),
        GradcheckCase('conv2d_stride2_reflect_bias', lambda x, w, b: ad.conv2d(x, w, stride=2, pad='reflect-same', bias=b),
                      lambda rng: [rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, 3, 3)),
                                   rng.standard_normal(3)]),
        GradcheckCase('conv2d_fft', lambda x, w: ad.conv2d(x, w, method='fft'),
                      lambda rng: [rng.standard_normal((2, 6, 7)), rng.standard_normal((2, 2, 3, 2))]),
        GradcheckCase('pad_reflect', lambda a: ad.pad_reflect(a, 1, 2, 1, 1), _normal((2, 4, 5))),
        GradcheckCase('upsample_bilinear2x', ad.upsample_bilinear2x, _normal((2, 3, 4))),
        GradcheckCase('linear', ad.linear,
                      lambda rng: [rng.standard_normal(5), rng.standard_normal((4, 5)), rng.standard_normal(4)]),
        GradcheckCase('leaky_relu', lambda a: ad.leaky_relu(a, 0.2), lambda rng: [_signed(rng, (3, 4))]),
        GradcheckCase('sigmoid', ad.sigmoid, _normal((3, 4))),
        GradcheckCase('softmax', ad.softmax, _normal((3, 3))),
        GradcheckCase('channel_norm', lambda x, g, s: ad.channel_norm(x, g, s),
                      lambda rng: [rng.standard_normal((3, 4, 5)), rng.standard_normal(3), rng.standard_normal(3)]),
        GradcheckCase('tv', lambda x: blur_model.tv(x, eps=1e-3), lambda rng: [rng.uniform(0, 1, (1, 5, 6))]),
        GradcheckCase('blur_forward', lambda x, k: blur_model.blur_forward(x, k),
                      lambda rng: [rng.uniform(0, 1, (2, 7, 8)), rng.uniform(0, 1, (3, 3))]),
        GradcheckCase('objective', lambda x, k, y: blur_model.objective_from_estimates(x, k, y, 0.1, tv_eps=1e-3)[1],
                      lambda rng: [rng.uniform(0, 1, (1, 7, 8)), rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (1, 5, 6))]),
    ]
    return cases + network_cases()


def network_cases() -> List[GradcheckCase]:
    """Whole-generator checks over every parameter at tiny double-precision scale."""
    gx_cfg = _tiny_gx_config()
    gx = build_gx(gx_cfg, 0, (5, 6), np.float64)
    z_x = Tensor(np.random.default_rng(1).uniform(0, 0.1, gx.z_shape))

    def gx_point(rng):
        return build_gx(gx_cfg, int(rng.integers(1 << 30)), (5, 6), np.float64).params

    cases = [GradcheckCase('generator_gx', lambda p: gx.forward(p, z_x), gx_point, points=2, floor=NETWORK_FLOOR)]

    for variant in ('no_hidden', 'one_hidden', 'two_hidden', 'skip_net'):
        gk_cfg = GkConfig(kernel_size=3, z_dim=4, hidden_dim=5, depth_variant=variant, skip_levels=1, skip_channels=2)
        gk = build_gk(gk_cfg, 0, np.float64)
        z_k = Tensor(np.random.default_rng(2).uniform(0, 0.1, gk.z_shape))

        def gk_point(rng, cfg=gk_cfg):
            return build_gk(cfg, int(rng.integers(1 << 30)), np.float64).params

        cases.append(GradcheckCase(f'generator_gk_{variant}', lambda p, net=gk, z=z_k: net.forward(p, z),
                                   gk_point, points=2, floor=NETWORK_FLOOR))
    return cases


def run_gradcheck(extra_cases: Sequence[GradcheckCase] = ()) -> SuiteResult:
    result = SuiteResult('gradcheck')
    for case in list(gradcheck_cases()) + list(extra_cases):
        rng = np.random.default_rng(zlib.crc32(case.name.encode()))
        worst = 0.0
        for i in range(case.points):
            err = ad.gradcheck(case.fn, case.make_point(rng), step=GRADCHECK_STEP, seed=i, floor=case.floor)
            worst = max(worst, err)
        result.check(worst < case.tolerance, f"{case.name}: max relative error {worst:.3e}")
        logger.debug(f"gradcheck {case.name}: {worst:.3e}")
    return result


def _random_params(store, rng, scale: float) -> Dict[str, Tensor]:
    return {name: Tensor(rng.standard_normal(value.shape) * scale) for name, value in store.items()}


def run_simplex(draws: int = 10_000, image_draws: int = 100) -> SuiteResult:
    result = SuiteResult('simplex')
    rng = np.random.default_rng(7)
    nets = []
    for variant in ('no_hidden', 'one_hidden', 'two_hidden'):
        cfg = GkConfig(kernel_size=5, z_dim=8, hidden_dim=16, depth_variant=variant)
        nets.append(build_gk(cfg, 0, np.float64))

    worst_sum, worst_min = 0.0, 0.0
    for i in range(draws):
        gk = nets[i % len(nets)]
        params = _random_params(gk.params, rng, 10 ** rng.uniform(-1, 1))
        z = Tensor(rng.uniform(0, 0.1, gk.z_shape))
        k = gk.forward(params, z).data
        worst_sum = max(worst_sum, abs(k.sum() - 1.0))
        worst_min = min(worst_min, k.min())
    result.check(worst_min >= 0, f"G_k produced a negative entry ({worst_min:.3e})")
    result.check(worst_sum <= 1e-6, f"G_k output sums deviate from 1 by {worst_sum:.3e}")

    gx = build_gx(_tiny_gx_config(), 0, (6, 6), np.float64)
    low, high = np.inf, -np.inf
    for _ in range(image_draws):
        params = _random_params(gx.params, rng, 10 ** rng.uniform(-1, 1))
        x = gx.forward(params, Tensor(rng.uniform(0, 0.1, gx.z_shape))).data
        low, high = min(low, x.min()), max(high, x.max())
    result.check(low >= 0.0 and high <= 1.0, f"G_x output left [0, 1]: [{low}, {high}]")
    return result


def conv_oracle(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Brute-force cross-correlation, one output pixel at a time."""
    c_out, c_in, kh, kw = w.shape
    _, h, wd = x.shape
    h_out = (h - kh) // stride + 1
    w_out = (wd - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                total = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            total += x[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = total
    return out


def run_conv_oracle(max_size: int = 8, max_kernel: int = 3) -> SuiteResult:
    result = SuiteResult('conv_oracle')
    rng = np.random.default_rng(3)
    worst_direct, worst_fft = 0.0, 0.0
    for h in range(1, max_size + 1):
        for w in range(1, max_size + 1):
            for kh in range(1, min(max_kernel, h) + 1):
                for kw in range(1, min(max_kernel, w) + 1):
                    x = rng.standard_normal((2, h, w))
                    weight = rng.standard_normal((2, 2, kh, kw))
                    for stride in (1, 2):
                        direct = ad.conv2d(Tensor(x), Tensor(weight), stride=stride).data
                        worst_direct = max(worst_direct, float(np.abs(direct - conv_oracle(x, weight, stride)).max()))
                    direct = ad.conv2d(Tensor(x), Tensor(weight)).data
                    fft = ad.conv2d(Tensor(x), Tensor(weight), method='fft').data
                    scale = max(float(np.abs(direct).max()), 1e-12)
                    worst_fft = max(worst_fft, float(np.abs(fft - direct).max()) / scale)
    result.check(worst_direct <= 1e-10, f"direct conv2d deviates from the oracle by {worst_direct:.3e}")
    result.check(worst_fft <= 1e-6, f"FFT conv2d deviates from direct by {worst_fft:.3e} (relative)")
    return result


def run_schedule() -> SuiteResult:
    result = SuiteResult('schedule')
    cfg = RunConfig.full(kernel_size=3)
    expected = {1: 0.01, 1999: 0.01, 2000: 0.005, 2500: 0.005, 3000: 0.0025, 3999: 0.0025,
                4000: 0.00125, 4500: 0.00125, 5000: 0.00125}
    for t, lr in expected.items():
        result.check(abs(lr_at(t, cfg) - lr) <= 1e-15, f"lr_at({t}) = {lr_at(t, cfg)}, expected {lr}")
    rates = [lr_at(t, cfg) for t in range(1, cfg.iterations + 1)]
    drops = sum(1 for a, b in zip(rates, rates[1:]) if b < a)
    result.check(all(b <= a for a, b in zip(rates, rates[1:])), "learning rate increased somewhere")
    result.check(drops == len(cfg.milestones), f"{drops} drops for {len(cfg.milestones)} milestones")
    lam = blur_model.lambda_from_sigma(1e-5)
    result.check(abs(lam - 1e-6) <= 1e-18, f"lambda_from_sigma(1e-5) = {lam}")
    return result


def run_metrics() -> SuiteResult:
    result = SuiteResult('metrics')
    rng = np.random.default_rng(5)
    ref = rng.uniform(0.2, 0.8, (32, 32))
    value = metrics.psnr(ref + 0.1, ref)
    result.check(abs(value - 20.0) <= 1e-9, f"PSNR of a 0.1 offset is {value}")
    result.check(metrics.psnr(ref, ref) == metrics.PSNR_CEILING, "identical images do not reach the PSNR ceiling")
    shifted = np.roll(ref, (1, 0), axis=(0, 1))
    result.check(metrics.psnr(shifted, ref, align=True, border_crop=1) == metrics.PSNR_CEILING,
                 "alignment does not undo a one-pixel shift")
    noisy = np.clip(ref + rng.normal(0, 0.05, ref.shape), 0, 1)
    result.check(metrics.psnr(noisy, ref, align=True, border_crop=3) >= metrics.psnr(noisy, ref, border_crop=3) - 1e-9,
                 "alignment worsened PSNR")
    ssim_self = metrics.ssim(ref, ref)
    result.check(abs(ssim_self - 1.0) <= 1e-12, f"SSIM(a, a) = {ssim_self}")

    k = np.zeros((7, 7))
    k[2:5, 3] = [0.2, 0.5, 0.3]
    k_est = np.zeros((7, 7))
    k_est[2:5, 2:4] = [[0.1, 0.15], [0.3, 0.2], [0.1, 0.15]]
    base = metrics.kernel_mse_aligned(k_est, k)
    moved = metrics.kernel_mse_aligned(np.roll(k_est, (1, -1), axis=(0, 1)), np.roll(k, (1, -1), axis=(0, 1)))
    result.check(abs(base - moved) <= 1e-15, f"kernel MSE not shift invariant: {base} vs {moved}")
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    expected = ((1 - 1 / 9) ** 2 + 8 * (1 / 9) ** 2) / 9
    value = metrics.kernel_mse_aligned(delta, np.full((3, 3), 1 / 9))
    result.check(abs(value - expected) <= 1e-12, f"delta vs uniform kernel MSE {value}, expected {expected}")
    return result


def run_verification(suites: Optional[Iterable[str]] = None,
                     extra_gradcheck_cases: Sequence[GradcheckCase] = ()) -> Dict[str, SuiteResult]:
    """Run the selected suites (all by default) in a fixed order."""
    selected = list(SUITES) if not suites else [s for s in SUITES if s in set(suites)]
    runners = {
        'gradcheck': lambda: run_gradcheck(extra_gradcheck_cases),
        'simplex': run_simplex,
        'conv_oracle': run_conv_oracle,
        'schedule': run_schedule,
        'metrics': run_metrics,
    }
    results = {}
    previous = ad.is_deterministic()
    ad.set_deterministic(False)
    try:
        for name in selected:
            logger.info(f"Running verification suite: {name}")
            started = time.perf_counter()
            results[name] = runners[name]()
            results[name].seconds = time.perf_counter() - started
    finally:
        ad.set_deterministic(previous)
    return results
