"""
Blur forward model and the TV-regularized deblurring objective.

    y = k (*) x + n

The latent image lives on a canvas enlarged by K-1 pixels per axis so the
blur is a *valid* convolution: no boundary model enters the loss.  The
kernel is flipped here (true convolution) on top of the engine's
cross-correlation primitive.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from deblur_errors import ConfigurationError, ContractViolation, DimensionError
import tensor_autodiff as ad
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

TV_EPS = 1e-6


@dataclass
class BlurObservation:
    y: np.ndarray
    sigma: float
    kernel_size: int

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.ndim == 2:
            self.y = self.y[None]
        if self.y.ndim != 3:
            raise DimensionError(f"observation must be C×H×W, got shape {self.y.shape}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def channels(self) -> int:
        return self.y.shape[0]

    @property
    def latent_hw(self) -> Tuple[int, int]:
        K = self.kernel_size
        return self.y.shape[1] + K - 1, self.y.shape[2] + K - 1


@dataclass
class LossBreakdown:
    fidelity: float
    tv: float
    lam: float
    total: float

    @classmethod
    def compose(cls, fidelity: float, tv: float, lam: float) -> 'LossBreakdown':
        fidelity, tv, lam = float(fidelity), float(tv), float(lam)
        return cls(fidelity, tv, lam, fidelity + lam * tv)

    def is_finite(self) -> bool:
        return bool(np.isfinite([self.fidelity, self.tv, self.total]).all())

    def to_dict(self) -> Dict[str, float]:
        return {'fidelity': self.fidelity, 'tv': self.tv, 'lambda': self.lam, 'total': self.total}


def blur_forward(x: Tensor, k: Tensor, use_fft: bool = False) -> Tensor:
    """Per-channel valid convolution of a C×(H+K-1)×(W+K-1) image with one K×K kernel."""
    if x.data.ndim != 3:
        raise DimensionError(f"blur_forward: image must be C×H×W, got {x.shape}")
    if k.data.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"blur_forward: kernel must be K×K, got {k.shape}")
    K = k.shape[0]
    c, h, w = x.shape
    if h < K or w < K:
        raise DimensionError(f"blur_forward: image {h}x{w} smaller than kernel {K}x{K}")

    weight = ad.reshape(ad.flip2d(k), (1, 1, K, K))
    method = 'fft' if use_fft else 'direct'
    if c == 1:
        return ad.conv2d(x, weight, pad='valid', method=method)
    channels = [ad.conv2d(ad.select_channels(x, i, i + 1), weight, pad='valid', method=method) for i in range(c)]
    return ad.concat(channels)


def tv_grid(shape) -> Tuple[int, int]:
    """Rows/cols of the TV term grid; an axis of size 1 contributes no difference."""
    h, w = shape[-2], shape[-1]
    return max(h - 1, 1), max(w - 1, 1)


def tv_terms(shape) -> int:
    c = shape[0] if len(shape) == 3 else 1
    r, q = tv_grid(shape)
    return c * r * q


def tv(x: Tensor, eps: float = TV_EPS) -> Tensor:
    """Smoothed isotropic total variation: sum of sqrt(dh^2 + dv^2 + eps^2)."""
    if eps < 0:
        raise ContractViolation(f"tv: eps must be >= 0, got {eps}")
    if x.data.ndim != 3:
        raise DimensionError(f"tv: expected C×H×W, got {x.shape}")
    c, h, w = x.shape
    r, q = tv_grid(x.shape)
    dtype = x.data.dtype

    acc = Tensor(np.full((c, r, q), eps * eps, dtype=dtype))
    base = ad.crop2d(x, 0, 0, r, q)
    if w > 1:
        dh = ad.crop2d(x, 0, 1, r, q) - base
        acc = acc + ad.square(dh)
    if h > 1:
        dv = ad.crop2d(x, 1, 0, r, q) - base
        acc = acc + ad.square(dv)
    return ad.sum_all(ad.sqrt(acc))


def lambda_from_sigma(sigma: float) -> float:
    """Noise-adaptive regularization weight, lambda = 0.1 * sigma."""
    if sigma < 0:
        raise ContractViolation(f"sigma must be >= 0, got {sigma}")
    return 0.1 * sigma


def objective_from_estimates(x: Tensor, k: Tensor, y: Union[Tensor, np.ndarray], lam: float,
                             tv_eps: float = TV_EPS, use_fft: bool = False) -> Tuple[LossBreakdown, Tensor]:
    """Mean squared reconstruction error plus lambda times per-term TV."""
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=x.data.dtype))
    K = k.shape[0]
    expected = (y.shape[0], y.shape[1] + K - 1, y.shape[2] + K - 1)
    if tuple(x.shape) != expected:
        raise DimensionError(f"latent image {x.shape} does not match observation {y.shape} with K={K}; "
                             f"expected {expected}")

    residual = blur_forward(x, k, use_fft) - y
    fidelity = ad.mean_all(ad.square(residual))
    tv_norm = ad.scale(tv(x, tv_eps), 1.0 / tv_terms(x.shape))
    total = fidelity + ad.scale(tv_norm, lam)
    breakdown = LossBreakdown.compose(fidelity.item(), tv_norm.item(), lam)
    return breakdown, total


def deblur_objective(gx, gk, params_x, params_k, z_x: Tensor, z_k: Tensor, y, lam: float,
                     tv_eps: float = TV_EPS, use_fft: bool = False) -> Tuple[LossBreakdown, Tensor]:
    """Forward both generators and evaluate the objective; the total is a tape node when params are tracked."""
    x = gx.forward(params_x, z_x)
    k = gk.forward(params_k, z_k)
    return objective_from_estimates(x, k, y, lam, tv_eps, use_fft)
