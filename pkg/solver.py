"""
ADAM optimization of the two generators under the deblurring objective.

Three loops share one driver:

    joint         one loss evaluation per iteration, both networks stepped
    alternating   G_k step, then a fresh evaluation and a G_x step
    fixed_kernel  G_k bypassed, a frozen kernel, only G_x stepped

Every run lasts exactly T iterations; a NaN/Inf loss or gradient is the
only early exit and raises DivergenceError carrying the partial report.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from blur_model import LossBreakdown, TV_EPS, objective_from_estimates
from deblur_errors import ConfigurationError, ContractViolation, DimensionError, DivergenceError
from generators import GeneratorNet, GkConfig, GxConfig, build_gk, build_gx, make_noise_inputs
import tensor_autodiff as ad
from tensor_autodiff import ParamStore, Tape, Tensor

logger = logging.getLogger(__name__)

MODES = ('joint', 'alternating', 'fixed_kernel')
SIMPLEX_TOL = 1e-4

FULL_SNAPSHOTS = (1, 20, 100, 600, 2000, 5000)
DESK_SNAPSHOTS = (1, 20, 100, 600, 1500)

# Called with (image, kernel) at each snapshot; returns named scalars (e.g. PSNR vs ground truth).
Tracer = Callable[[np.ndarray, Optional[np.ndarray]], Dict[str, float]]


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, store: ParamStore, **kwargs) -> 'AdamState':
        return cls(m={n: np.zeros_like(p) for n, p in store.items()},
                   v={n: np.zeros_like(p) for n, p in store.items()}, **kwargs)


@dataclass
class RunConfig:
    iterations: int = 5000
    lr0: float = 0.01
    milestones: Tuple[int, ...] = (2000, 3000, 4000)
    decay: float = 0.5
    mode: str = 'joint'
    seed: int = 0
    snapshot_iters: Tuple[int, ...] = FULL_SNAPSHOTS
    lam: float = 1e-6
    perturb_std: float = 0.001
    tv_eps: float = TV_EPS
    use_fft: bool = False
    deterministic: bool = False
    precision: str = 'single'
    log_every: int = 100
    show_progress: bool = False
    gx: GxConfig = field(default_factory=GxConfig.full)
    gk: GkConfig = field(default_factory=GkConfig)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.snapshot_iters = tuple(sorted(set(int(s) for s in self.snapshot_iters)))
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError(f"milestones must be strictly increasing: {self.milestones}")
        if self.milestones and (self.milestones[0] < 1 or self.milestones[-1] >= self.iterations):
            raise ConfigurationError(f"milestones {self.milestones} must lie in [1, {self.iterations})")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got '{self.mode}'")
        bad = [s for s in self.snapshot_iters if not 1 <= s <= self.iterations]
        if bad:
            raise ConfigurationError(f"snapshot iterations {bad} outside [1, {self.iterations}]")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.perturb_std < 0:
            raise ConfigurationError(f"perturb_std must be >= 0, got {self.perturb_std}")
        if self.precision not in ad.PRECISIONS:
            raise ConfigurationError(f"precision must be one of {tuple(ad.PRECISIONS)}")
        if self.log_every < 1:
            raise ConfigurationError(f"log_every must be >= 1, got {self.log_every}")

    @property
    def kernel_size(self) -> int:
        return self.gk.kernel_size

    @property
    def dtype(self):
        return ad.PRECISIONS[self.precision]

    @classmethod
    def full(cls, kernel_size: int = 31, **overrides) -> 'RunConfig':
        gk = overrides.pop('gk', None) or GkConfig.full(kernel_size)
        return cls(gk=gk, **overrides)

    @classmethod
    def desk(cls, kernel_size: int = 31, **overrides) -> 'RunConfig':
        gk = overrides.pop('gk', None) or GkConfig.desk(kernel_size)
        defaults = dict(iterations=1500, milestones=(600, 900, 1200), snapshot_iters=DESK_SNAPSHOTS,
                        gx=GxConfig.desk())
        defaults.update(overrides)
        return cls(gk=gk, **defaults)

    def with_mode(self, mode: str) -> 'RunConfig':
        return replace(self, mode=mode)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['milestones'] = list(self.milestones)
        data['snapshot_iters'] = list(self.snapshot_iters)
        return data


@dataclass
class Snapshot:
    iteration: int
    image: np.ndarray
    kernel: np.ndarray
    trace: Dict[str, float] = field(default_factory=dict)


@dataclass
class RunReport:
    mode: str
    config: RunConfig
    seed: int
    losses: List[LossBreakdown] = field(default_factory=list)
    kernel: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    snapshots: Dict[int, Snapshot] = field(default_factory=dict)
    wall_clock: float = 0.0
    gradient_evaluations: int = 0
    status: str = 'ok'

    @property
    def final_loss(self) -> Optional[LossBreakdown]:
        return self.losses[-1] if self.losses else None

    def loss_frame(self) -> pd.DataFrame:
        rows = [dict(iteration=i + 1, **b.to_dict()) for i, b in enumerate(self.losses)]
        return pd.DataFrame(rows, columns=['iteration', 'fidelity', 'tv', 'lambda', 'total'])

    def trace_frame(self) -> pd.DataFrame:
        rows = [dict(iteration=t, **s.trace) for t, s in sorted(self.snapshots.items()) if s.trace]
        return pd.DataFrame(rows)


def lr_at(t: int, cfg: RunConfig) -> float:
    """Step schedule; a milestone applies from its own iteration on."""
    if not 1 <= t <= cfg.iterations:
        raise ContractViolation(f"iteration {t} outside [1, {cfg.iterations}]")
    drops = sum(1 for m in cfg.milestones if m <= t)
    return cfg.lr0 * cfg.decay ** drops


def check_gradients(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState):
    """Raise before any update when a gradient is non-finite or misshapen."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter '{name}' at ADAM step {state.t + 1}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected ADAM update of every parameter in place."""
    check_gradients(params, grads, state)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / c1
        v_hat = v / c2
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def build_generators(y_shape: Sequence[int], cfg: RunConfig, with_kernel_net: bool = True
                     ) -> Tuple[GeneratorNet, Optional[GeneratorNet]]:
    """G_x sized for the observation's latent canvas and (optionally) G_k, both from cfg.seed."""
    if len(y_shape) != 3:
        raise DimensionError(f"observation must be C×H×W, got {tuple(y_shape)}")
    c, h, w = y_shape
    K = cfg.kernel_size
    gx_cfg = cfg.gx if cfg.gx.output_channels == c else replace(cfg.gx, output_channels=c)
    gx = build_gx(gx_cfg, cfg.seed, (h + K - 1, w + K - 1), cfg.dtype)
    gk = build_gk(cfg.gk, cfg.seed, cfg.dtype) if with_kernel_net else None
    return gx, gk


def check_simplex(k: np.ndarray, tol: float = SIMPLEX_TOL):
    if k.min() < 0 or abs(float(k.sum(dtype=np.float64)) - 1.0) > tol:
        raise ContractViolation(f"kernel left the simplex: min {k.min():.3e}, sum {k.sum():.8f}")


class _OptimizationRun:
    """State of one run: generators, noise, ADAM moments, and the growing report."""

    def __init__(self, y: np.ndarray, cfg: RunConfig, gx: GeneratorNet, gk: Optional[GeneratorNet],
                 k_fixed: Optional[np.ndarray] = None, tracer: Optional[Tracer] = None):
        self.cfg = cfg
        self.gx = gx
        self.gk = gk
        self.tracer = tracer
        self.y = Tensor(np.asarray(y, dtype=gx.params.dtype))
        K = cfg.kernel_size if k_fixed is None else k_fixed.shape[0]
        expected = (self.y.shape[0], self.y.shape[1] + K - 1, self.y.shape[2] + K - 1)
        if tuple(gx.output_shape) != expected:
            raise DimensionError(f"G_x emits {gx.output_shape}, observation {self.y.shape} with K={K} needs {expected}")
        if gk is not None and tuple(gk.output_shape) != (K, K):
            raise DimensionError(f"G_k emits {gk.output_shape}, expected ({K}, {K})")
        self.k_fixed = None if k_fixed is None else Tensor(np.asarray(k_fixed, dtype=gx.params.dtype))

        self.noise = make_noise_inputs(gx, gk, cfg.seed, cfg.perturb_std)
        self.z_k = Tensor(self.noise.z_k)
        self.state_x = AdamState.for_params(gx.params)
        self.state_k = AdamState.for_params(gk.params) if gk is not None else None
        self.report = RunReport(mode=cfg.mode, config=cfg, seed=cfg.seed)

    def _objective(self, x: Tensor, k: Tensor, t: int) -> Tuple[LossBreakdown, Tensor]:
        breakdown, total = objective_from_estimates(x, k, self.y, self.cfg.lam, self.cfg.tv_eps, self.cfg.use_fft)
        if not breakdown.is_finite():
            raise DivergenceError(f"loss became non-finite at iteration {t}: {breakdown.to_dict()}", iteration=t)
        return breakdown, total

    def _joint_step(self, z_x: Tensor, lr: float, t: int) -> LossBreakdown:
        tape = Tape()
        px = tape.watch(self.gx.params)
        pk = tape.watch(self.gk.params)
        x = self.gx.forward(px, z_x)
        k = self.gk.forward(pk, self.z_k)
        breakdown, total = self._objective(x, k, t)
        tape.backward(total)
        self.report.gradient_evaluations += 1
        # both networks or neither
        check_gradients(self.gx.params, self.gx.params.grads, self.state_x)
        check_gradients(self.gk.params, self.gk.params.grads, self.state_k)
        adam_step(self.gx.params, self.gx.params.grads, self.state_x, lr)
        adam_step(self.gk.params, self.gk.params.grads, self.state_k, lr)
        return breakdown

    def _alternating_step(self, z_x: Tensor, lr: float, t: int) -> LossBreakdown:
        # kernel half-step with G_x frozen
        tape = Tape()
        pk = tape.watch(self.gk.params)
        x = self.gx.forward(None, z_x)
        k = self.gk.forward(pk, self.z_k)
        _, total = self._objective(x, k, t)
        tape.backward(total)
        self.report.gradient_evaluations += 1
        adam_step(self.gk.params, self.gk.params.grads, self.state_k, lr)

        # image half-step against the updated kernel
        tape = Tape()
        px = tape.watch(self.gx.params)
        x = self.gx.forward(px, z_x)
        k = self.gk.forward(None, self.z_k)
        breakdown, total = self._objective(x, k, t)
        tape.backward(total)
        self.report.gradient_evaluations += 1
        adam_step(self.gx.params, self.gx.params.grads, self.state_x, lr)
        return breakdown

    def _fixed_kernel_step(self, z_x: Tensor, lr: float, t: int) -> LossBreakdown:
        tape = Tape()
        px = tape.watch(self.gx.params)
        x = self.gx.forward(px, z_x)
        breakdown, total = self._objective(x, self.k_fixed, t)
        tape.backward(total)
        self.report.gradient_evaluations += 1
        adam_step(self.gx.params, self.gx.params.grads, self.state_x, lr)
        return breakdown

    def _current_estimates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Clean-z evaluation of both generators (no perturbation, no tape)."""
        x = self.gx.forward(None, Tensor(self.noise.z_x)).data.copy()
        if self.gk is not None:
            k = self.gk.forward(None, self.z_k).data.copy()
        else:
            k = self.k_fixed.data.copy()
        return x, k

    def _snapshot(self, t: int):
        x, k = self._current_estimates()
        check_simplex(k)
        trace = self.tracer(x, k) if self.tracer is not None else {}
        self.report.snapshots[t] = Snapshot(t, x, k, trace)
        if trace:
            logger.info(f"Snapshot t={t}: " + ", ".join(f"{key}={value:.4f}" for key, value in trace.items()))
        else:
            logger.debug(f"Snapshot t={t} captured")

    def run(self) -> RunReport:
        cfg = self.cfg
        step = {'joint': self._joint_step, 'alternating': self._alternating_step,
                'fixed_kernel': self._fixed_kernel_step}[cfg.mode]
        snapshot_at = set(cfg.snapshot_iters)
        logger.info(f"Starting {cfg.mode} run: T={cfg.iterations}, lambda={cfg.lam:.3e}, seed={cfg.seed}, "
                    f"G_x {self.gx.params.num_parameters():,} params"
                    + (f", G_k {self.gk.params.num_parameters():,} params" if self.gk is not None else ""))

        previous_deterministic = ad.is_deterministic()
        if cfg.deterministic:
            ad.set_deterministic(True)
        started = time.perf_counter()
        lr_prev = None
        t = 0
        try:
            for t in tqdm(range(1, cfg.iterations + 1), desc=cfg.mode, disable=not cfg.show_progress,
                          leave=False):
                lr = lr_at(t, cfg)
                if lr_prev is not None and lr != lr_prev:
                    logger.info(f"Iteration {t}: learning rate {lr_prev:g} -> {lr:g}")
                lr_prev = lr

                z_x = Tensor(self.noise.perturbed_z_x())
                breakdown = step(z_x, lr, t)
                self.report.losses.append(breakdown)
                if t % cfg.log_every == 0:
                    logger.debug(f"Iteration {t}: fidelity={breakdown.fidelity:.6e} tv={breakdown.tv:.6e} "
                                 f"total={breakdown.total:.6e}")
                if t in snapshot_at:
                    self._snapshot(t)
        except DivergenceError as e:
            self.report.status = 'diverged'
            self.report.wall_clock = time.perf_counter() - started
            e.iteration = e.iteration or t
            e.partial_report = self.report
            logger.error(f"Run diverged at iteration {e.iteration}: {e}")
            raise
        finally:
            ad.set_deterministic(previous_deterministic)

        self.report.image, self.report.kernel = self._current_estimates()
        check_simplex(self.report.kernel)
        self.report.wall_clock = time.perf_counter() - started
        final = self.report.final_loss
        logger.info(f"Finished {cfg.mode} run in {self.report.wall_clock:.1f}s "
                    f"({self.report.gradient_evaluations} gradient evaluations), final total {final.total:.6e}")
        return self.report


def _prepare(y, cfg: RunConfig, gx, gk, with_kernel_net: bool):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if gx is None or (with_kernel_net and gk is None):
        built_x, built_k = build_generators(y.shape, cfg, with_kernel_net)
        gx = gx or built_x
        gk = gk or built_k
    return y, gx, gk


def run_joint(y, cfg: RunConfig, gx: Optional[GeneratorNet] = None, gk: Optional[GeneratorNet] = None,
              tracer: Optional[Tracer] = None) -> RunReport:
    """One loss evaluation per iteration updates both generators."""
    if cfg.mode != 'joint':
        cfg = cfg.with_mode('joint')
    y, gx, gk = _prepare(y, cfg, gx, gk, True)
    return _OptimizationRun(y, cfg, gx, gk, tracer=tracer).run()


def run_alternating(y, cfg: RunConfig, gx: Optional[GeneratorNet] = None, gk: Optional[GeneratorNet] = None,
                    tracer: Optional[Tracer] = None) -> RunReport:
    """G_k step with G_x frozen, then a re-evaluated G_x step with G_k frozen."""
    if cfg.mode != 'alternating':
        cfg = cfg.with_mode('alternating')
    y, gx, gk = _prepare(y, cfg, gx, gk, True)
    return _OptimizationRun(y, cfg, gx, gk, tracer=tracer).run()


def run_fixed_kernel(y, k_fixed: np.ndarray, cfg: RunConfig, gx: Optional[GeneratorNet] = None,
                     tracer: Optional[Tracer] = None) -> RunReport:
    """Fit G_x alone against a frozen simplex kernel."""
    k_fixed = np.asarray(k_fixed)
    if k_fixed.ndim != 2 or k_fixed.shape[0] != k_fixed.shape[1]:
        raise DimensionError(f"fixed kernel must be K×K, got {k_fixed.shape}")
    if k_fixed.min() < 0 or abs(float(k_fixed.sum()) - 1.0) > 1e-6:
        raise ContractViolation(f"fixed kernel is not on the simplex (sum {k_fixed.sum():.8f})")
    cfg = replace(cfg, mode='fixed_kernel', gk=replace(cfg.gk, kernel_size=k_fixed.shape[0]))
    y, gx, _ = _prepare(y, cfg, gx, None, False)
    return _OptimizationRun(y, cfg, gx, None, k_fixed=k_fixed, tracer=tracer).run()


def run(y, cfg: RunConfig, k_fixed: Optional[np.ndarray] = None, tracer: Optional[Tracer] = None) -> RunReport:
    """Dispatch on cfg.mode."""
    if cfg.mode == 'joint':
        return run_joint(y, cfg, tracer=tracer)
    if cfg.mode == 'alternating':
        return run_alternating(y, cfg, tracer=tracer)
    if k_fixed is None:
        raise ConfigurationError("fixed_kernel mode needs a kernel")
    return run_fixed_kernel(y, k_fixed, cfg, tracer=tracer)
