"""
Restoration quality metrics: PSNR, SSIM, shift-aligned kernel MSE and the
Error Ratio.

Blind deconvolution recovers image and kernel only up to a translation, so
image metrics search integer shifts within the border crop before scoring.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import signal

from deblur_errors import ContractViolation, DimensionError
from solver import run_fixed_kernel

logger = logging.getLogger(__name__)

PSNR_CEILING = 300.0
ERROR_RATIO_CEILING = 1e12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    shift: Tuple[int, int] = (0, 0)
    kernel_mse_aligned: Optional[float] = None
    error_ratio: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            'psnr': self.psnr,
            'ssim': self.ssim,
            'kernel_mse_aligned': self.kernel_mse_aligned,
            'error_ratio': self.error_ratio,
            'shift_dy': self.shift[0],
            'shift_dx': self.shift[1],
        }


def _as_chw(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise DimensionError(f"expected H×W or C×H×W image, got shape {img.shape}")
    return img


def border_for_kernel(kernel_size: int) -> int:
    """Pixels cropped (and searched) on each side: ceil(K/2)."""
    return int(math.ceil(kernel_size / 2))


def crop_border(img: np.ndarray, border: int) -> np.ndarray:
    if border < 0:
        raise ContractViolation(f"border crop must be >= 0, got {border}")
    h, w = img.shape[-2:]
    if h - 2 * border < 1 or w - 2 * border < 1:
        raise ContractViolation(f"crop of {border} leaves no pixels of a {h}x{w} image")
    if border == 0:
        return img
    return img[..., border:h - border, border:w - border]


def center_crop(img: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    """Central hw window; used when a larger kernel produced a larger latent canvas."""
    h, w = img.shape[-2:]
    th, tw = int(hw[0]), int(hw[1])
    if th > h or tw > w:
        raise DimensionError(f"cannot crop {h}x{w} to {th}x{tw}")
    top, left = (h - th) // 2, (w - tw) // 2
    return img[..., top:top + th, left:left + tw]


def apply_shift(img: np.ndarray, shift: Tuple[int, int]) -> np.ndarray:
    return np.roll(img, shift, axis=(-2, -1))


def _candidate_shifts(max_shift: int):
    """All shifts in the square, ordered so that the first best score wins ties."""
    span = range(-max_shift, max_shift + 1)
    return sorted(((dy, dx) for dy in span for dx in span), key=lambda s: (abs(s[0]) + abs(s[1]), s))


def align_shift(est, ref, max_shift: int, criterion: str = 'xcorr') -> Tuple[int, int]:
    """Integer (dy, dx) such that np.roll(est, (dy, dx)) best matches ref.

    Scores are taken over the interior window cropped by max_shift, so rolled-in
    wrap-around rows never count.  'xcorr' maximizes cross-correlation, 'ssd'
    minimizes the sum of squared differences.
    """
    if max_shift < 0:
        raise ContractViolation(f"max_shift must be >= 0, got {max_shift}")
    if criterion not in ('xcorr', 'ssd'):
        raise ContractViolation(f"unknown alignment criterion '{criterion}'")
    est, ref = _as_chw(est), _as_chw(ref)
    if est.shape != ref.shape:
        raise DimensionError(f"align_shift: shapes {est.shape} and {ref.shape} differ")
    ref_win = crop_border(ref, max_shift)

    best, best_score = (0, 0), -np.inf
    for shift in _candidate_shifts(max_shift):
        win = crop_border(apply_shift(est, shift), max_shift)
        if criterion == 'xcorr':
            score = float(np.sum(win * ref_win))
        else:
            score = -float(np.sum((win - ref_win) ** 2))
        if score > best_score:
            best, best_score = shift, score
    return best


def psnr(est, ref, align: bool = False, border_crop: int = 0) -> float:
    """10*log10(1/MSE) with peak 1, capped at PSNR_CEILING."""
    est, ref = _as_chw(est), _as_chw(ref)
    if est.shape != ref.shape:
        raise DimensionError(f"psnr: shapes {est.shape} and {ref.shape} differ")
    if align:
        est = apply_shift(est, align_shift(est, ref, border_crop, 'ssd'))
    diff = crop_border(est, border_crop) - crop_border(ref, border_crop)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return PSNR_CEILING
    return min(10.0 * math.log10(1.0 / mse), PSNR_CEILING)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    def filt(img):
        return signal.correlate2d(img, window, mode='valid')

    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    ssim_map = ((2 * mu_ab + c1) * (2 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def ssim(est, ref) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, L=1); colour images average their channels."""
    est, ref = _as_chw(est), _as_chw(ref)
    if est.shape != ref.shape:
        raise DimensionError(f"ssim: shapes {est.shape} and {ref.shape} differ")
    if est.shape[1] < SSIM_WINDOW or est.shape[2] < SSIM_WINDOW:
        raise ContractViolation(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {est.shape[1:]}")
    window = _gaussian_window()
    return float(np.mean([_ssim_channel(e, r, window) for e, r in zip(est, ref)]))


def pad_kernel(k: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad a square kernel to size×size, keeping it centered."""
    k = np.asarray(k, dtype=np.float64)
    K = k.shape[0]
    if K > size or (size - K) % 2:
        raise DimensionError(f"cannot center a {K}x{K} kernel in {size}x{size}")
    p = (size - K) // 2
    return np.pad(k, p)


def kernel_mse_aligned(k_est, k_gt) -> float:
    """MSE after the circular integer shift of k_est that best correlates with k_gt."""
    k_est = np.asarray(k_est, dtype=np.float64)
    k_gt = np.asarray(k_gt, dtype=np.float64)
    if k_est.ndim != 2 or k_gt.ndim != 2 or k_est.shape[0] != k_est.shape[1] or k_gt.shape[0] != k_gt.shape[1]:
        raise DimensionError(f"kernels must be square, got {k_est.shape} and {k_gt.shape}")
    size = max(k_est.shape[0], k_gt.shape[0])
    k_est, k_gt = pad_kernel(k_est, size), pad_kernel(k_gt, size)

    best, best_score = (0, 0), -np.inf
    for shift in _candidate_shifts(size // 2):
        score = float(np.sum(np.roll(k_est, shift, axis=(0, 1)) * k_gt))
        if score > best_score:
            best, best_score = shift, score
    aligned = np.roll(k_est, best, axis=(0, 1))
    return float(np.mean((aligned - k_gt) ** 2))


def aligned_ssd(est, ref, border: int) -> float:
    """Sum of squared differences after SSD-optimal alignment and border crop."""
    est, ref = _as_chw(est), _as_chw(ref)
    if est.shape != ref.shape:
        raise DimensionError(f"ssd: shapes {est.shape} and {ref.shape} differ")
    est = apply_shift(est, align_shift(est, ref, border, 'ssd'))
    diff = crop_border(est, border) - crop_border(ref, border)
    return float(np.sum(diff * diff))


def error_ratio(y, k_est, k_gt, x_gt, cfg) -> float:
    """SSD of the restoration under k_est over SSD of the restoration under k_gt.

    Both restorations are fixed-kernel runs with the same configuration and
    seed; identical kernels share one restoration, so k_est == k_gt gives 1.0.
    """
    k_est = np.asarray(k_est, dtype=np.float64)
    k_gt = np.asarray(k_gt, dtype=np.float64)
    size = max(k_est.shape[0], k_gt.shape[0])
    k_est, k_gt = pad_kernel(k_est, size), pad_kernel(k_gt, size)
    border = border_for_kernel(size)

    restorations: Dict[bytes, np.ndarray] = {}
    for k in (k_gt, k_est):
        key = k.tobytes()
        if key not in restorations:
            logger.info(f"Error ratio: fixed-kernel restoration {len(restorations) + 1}")
            restored = _as_chw(run_fixed_kernel(y, k, cfg).image)
            restorations[key] = center_crop(restored, _as_chw(x_gt).shape[-2:])
    numerator = aligned_ssd(restorations[k_est.tobytes()], x_gt, border)
    denominator = aligned_ssd(restorations[k_gt.tobytes()], x_gt, border)

    if denominator == 0:
        if numerator == 0:
            return 1.0
        logger.warning("Error ratio: ground-truth restoration is exact; reporting the ceiling")
        return ERROR_RATIO_CEILING
    return numerator / denominator


def evaluate_restoration(x_est, x_gt, k_est=None, k_gt=None, border: Optional[int] = None) -> MetricsReport:
    """PSNR/SSIM on the aligned, border-cropped image plus kernel MSE when both kernels are given."""
    x_est, x_gt = _as_chw(x_est), _as_chw(x_gt)
    if x_est.shape != x_gt.shape:
        raise DimensionError(f"restored image {x_est.shape} and ground truth {x_gt.shape} differ")
    if border is None:
        sizes = [np.shape(k)[0] for k in (k_est, k_gt) if k is not None]
        border = border_for_kernel(max(sizes)) if sizes else 0

    shift = align_shift(x_est, x_gt, border, 'ssd')
    aligned = apply_shift(x_est, shift)
    report = MetricsReport(
        psnr=psnr(aligned, x_gt, align=False, border_crop=border),
        ssim=ssim(crop_border(aligned, border), crop_border(x_gt, border)),
        shift=shift,
    )
    if k_est is not None and k_gt is not None:
        report.kernel_mse_aligned = kernel_mse_aligned(k_est, k_gt)
    return report
