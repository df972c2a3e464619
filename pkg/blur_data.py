"""
Synthetic blur data, noise estimation and on-disk formats.

Formats (all line-oriented text except the 8-bit images):

    kernel      "K K" then K rows of K decimals
    PFMX image  "PFMX C H W" then C*H*W whitespace-separated decimals (lossless)
    PGM/PPM     binary 8-bit portable graymap/pixmap, maxval 255
    sidecar     "key = value" lines (pair.txt, manifest.txt, metrics.txt)

A dataset pair directory holds x_gt.<ext>, y.<ext>, k_gt.txt and pair.txt.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import pywt
from PIL import Image
from scipy import signal, stats

from deblur_errors import ConfigurationError, ContractViolation, DimensionError, FormatError
from generators import seeded_rng

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IMAGE_EXTENSIONS = ('.pfmx', '.pgm', '.ppm', '.png')
SIMPLEX_TOL = 1e-6

STREAM_WALK = 11
STREAM_NOISE = 12

# Gaussian quantile for MAD -> sigma (0.6745)
MAD_DENOMINATOR = stats.norm.ppf(0.75)


@dataclass
class SynthSpec:
    kernel_size: int = 7
    walk_steps: int = 16
    step_std: float = 0.5
    sigma: float = 0.0
    seed: int = 0
    subsamples: int = 4

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.walk_steps < 0:
            raise ConfigurationError(f"walk_steps must be >= 0, got {self.walk_steps}")
        if self.step_std < 0:
            raise ConfigurationError(f"step_std must be >= 0, got {self.step_std}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if self.subsamples < 1:
            raise ConfigurationError(f"subsamples must be >= 1, got {self.subsamples}")


@dataclass
class DatasetPair:
    x_gt: np.ndarray
    k_gt: np.ndarray
    y: np.ndarray
    sigma: float
    seed: Optional[int] = None
    name: str = ''

    def __post_init__(self):
        self.x_gt = _as_chw(self.x_gt)
        self.y = _as_chw(self.y)
        self.k_gt = np.asarray(self.k_gt, dtype=np.float64)
        K = self.kernel_size
        expected = (self.x_gt.shape[0], self.x_gt.shape[1] - K + 1, self.x_gt.shape[2] - K + 1)
        if self.y.shape != expected:
            raise DimensionError(f"y has shape {self.y.shape}; x_gt {self.x_gt.shape} with K={K} needs {expected}")
        check_kernel(self.k_gt)

    @property
    def kernel_size(self) -> int:
        return self.k_gt.shape[0]


def _as_chw(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise DimensionError(f"expected H×W or C×H×W image, got shape {img.shape}")
    return img


def check_kernel(k: np.ndarray, tol: float = SIMPLEX_TOL):
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {k.shape}")
    if k.min() < -tol or abs(float(k.sum()) - 1.0) > tol:
        raise ContractViolation(f"kernel is not on the simplex: min {k.min():.3e}, sum {k.sum():.9f}")


def delta_kernel(size: int) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def gen_kernel_randomwalk(spec: SynthSpec) -> np.ndarray:
    """Motion-like kernel from a seeded 2-D Gaussian random walk.

    The trajectory is densified, shifted so its mean sits on the kernel center,
    splatted bilinearly and normalized.  Samples that still fall outside the
    grid are clamped to the border.
    """
    K = spec.kernel_size
    rng = seeded_rng(spec.seed, STREAM_WALK)
    steps = rng.normal(0.0, spec.step_std, size=(spec.walk_steps, 2))
    vertices = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])

    if len(vertices) > 1:
        frac = np.arange(spec.subsamples) / spec.subsamples
        starts, ends = vertices[:-1], vertices[1:]
        dense = starts[:, None, :] + frac[None, :, None] * (ends - starts)[:, None, :]
        points = np.vstack([dense.reshape(-1, 2), vertices[-1:]])
    else:
        points = vertices

    center = (K - 1) / 2.0
    points = points - points.mean(axis=0) + center
    clamped = np.clip(points, 0.0, K - 1.0)
    if np.any(clamped != points):
        logger.warning(f"Random walk (seed {spec.seed}) left the {K}x{K} grid; "
                       f"{int(np.any(clamped != points, axis=1).sum())} samples clamped to the border")
    points = clamped

    kernel = np.zeros((K, K))
    for py, px in points:
        y0, x0 = int(np.floor(py)), int(np.floor(px))
        y1, x1 = min(y0 + 1, K - 1), min(x0 + 1, K - 1)
        fy, fx = py - y0, px - x0
        kernel[y0, x0] += (1 - fy) * (1 - fx)
        kernel[y0, x1] += (1 - fy) * fx
        kernel[y1, x0] += fy * (1 - fx)
        kernel[y1, x1] += fy * fx
    return kernel / kernel.sum()


def synth_blur(x_gt, k_gt, sigma: float, seed: int, name: str = '') -> DatasetPair:
    """y = valid-convolution(x_gt, k_gt) + N(0, sigma^2), clipped to [0, 1]."""
    x_gt = _as_chw(x_gt)
    k_gt = np.asarray(k_gt, dtype=np.float64)
    check_kernel(k_gt)
    if sigma < 0:
        raise ContractViolation(f"sigma must be >= 0, got {sigma}")
    K = k_gt.shape[0]
    if x_gt.shape[1] <= K or x_gt.shape[2] <= K:
        raise DimensionError(f"image {x_gt.shape[1]}x{x_gt.shape[2]} must exceed the {K}x{K} kernel on each axis")

    blurred = np.stack([signal.convolve2d(channel, k_gt, mode='valid') for channel in x_gt])
    if sigma > 0:
        noise = seeded_rng(seed, STREAM_NOISE).normal(0.0, sigma, size=blurred.shape)
        blurred = blurred + noise
    y = np.clip(blurred, 0.0, 1.0)
    return DatasetPair(x_gt=x_gt, k_gt=k_gt, y=y, sigma=float(sigma), seed=int(seed), name=name)


def estimate_sigma(y) -> float:
    """Wavelet MAD noise estimate from the finest diagonal Haar coefficients."""
    y = _as_chw(y)
    if y.shape[1] < 2 or y.shape[2] < 2:
        raise ContractViolation(f"estimate_sigma needs at least 2x2 pixels, got {y.shape[1:]}")
    h, w = y.shape[1] // 2 * 2, y.shape[2] // 2 * 2
    details = []
    for channel in y:
        _, (_, _, cD) = pywt.dwt2(channel[:h, :w], 'haar')
        details.append(np.abs(cD).ravel())
    return float(np.median(np.concatenate(details)) / MAD_DENOMINATOR)


# ---------------------------------------------------------------------------
# key/value sidecars
# ---------------------------------------------------------------------------

def format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return ','.join(format_value(v) for v in value)
    if value is None:
        return ''
    return str(value)


def write_key_value(path: PathLike, items: Mapping[str, object]):
    lines = [f"{key} = {format_value(value)}" for key, value in items.items()]
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def read_key_value(path: PathLike) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, "file not found")
    values: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise FormatError(path, "expected 'key = value'", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise FormatError(path, "empty key", line=number)
        values[key] = value
    return values


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def write_kernel(path: PathLike, k: np.ndarray):
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"kernel must be square, got {k.shape}")
    K = k.shape[0]
    rows = [' '.join(repr(float(v)) for v in row) for row in k]
    Path(path).write_text(f"{K} {K}\n" + '\n'.join(rows) + '\n', encoding='utf-8')


def read_kernel(path: PathLike, check: bool = True) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(path, "kernel file not found")
    lines = path.read_text(encoding='utf-8').splitlines()
    if not lines:
        raise FormatError(path, "empty kernel file", line=1)
    header = lines[0].split()
    if len(header) != 2:
        raise FormatError(path, f"header must be 'K K', got '{lines[0]}'", line=1, field='header')
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError:
        raise FormatError(path, f"non-integer size in '{lines[0]}'", line=1, field='header')
    if rows != cols or rows < 1:
        raise FormatError(path, f"kernel must be square, header says {rows}x{cols}", line=1, field='header')

    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != rows:
        raise FormatError(path, f"expected {rows} rows, found {len(body)}", line=len(body) + 2)
    kernel = np.zeros((rows, cols))
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != cols:
            raise FormatError(path, f"expected {cols} values, found {len(fields)}", line=i + 2)
        for j, text in enumerate(fields):
            try:
                kernel[i, j] = float(text)
            except ValueError:
                raise FormatError(path, f"not a number: '{text}'", line=i + 2, field=f"column {j + 1}")
    if check:
        try:
            check_kernel(kernel)
        except (ContractViolation, DimensionError) as e:
            raise FormatError(path, str(e))
    return kernel


def kernel_visualization(k: np.ndarray) -> np.ndarray:
    """Max-normalized copy of a kernel for viewing as an 8-bit image."""
    k = np.asarray(k, dtype=np.float64)
    peak = k.max()
    return k / peak if peak > 0 else k


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _read_pfmx(path: Path) -> np.ndarray:
    tokens_by_line = [line.split() for line in path.read_text(encoding='utf-8').splitlines()]
    if not tokens_by_line or len(tokens_by_line[0]) != 4 or tokens_by_line[0][0] != 'PFMX':
        raise FormatError(path, "header must be 'PFMX C H W'", line=1, field='header')
    try:
        c, h, w = (int(v) for v in tokens_by_line[0][1:])
    except ValueError:
        raise FormatError(path, "non-integer dimensions", line=1, field='header')
    if min(c, h, w) < 1:
        raise FormatError(path, f"invalid dimensions {c}x{h}x{w}", line=1, field='header')

    values: List[float] = []
    for number, tokens in enumerate(tokens_by_line[1:], start=2):
        for position, text in enumerate(tokens, start=1):
            try:
                values.append(float(text))
            except ValueError:
                raise FormatError(path, f"not a number: '{text}'", line=number, field=f"value {position}")
    if len(values) != c * h * w:
        raise FormatError(path, f"expected {c * h * w} values, found {len(values)}", field='data')
    return np.array(values).reshape(c, h, w)


def _write_pfmx(path: Path, img: np.ndarray):
    c, h, w = img.shape
    rows = [' '.join(repr(float(v)) for v in row) for row in img.reshape(c * h, w)]
    path.write_text(f"PFMX {c} {h} {w}\n" + '\n'.join(rows) + '\n', encoding='utf-8')


def read_image(path: PathLike) -> np.ndarray:
    """C×H×W float image in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FormatError(path, "image file not found")
    if path.suffix.lower() == '.pfmx':
        return _read_pfmx(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ('L', 'RGB'):
                im = im.convert('RGB' if im.mode in ('RGBA', 'P', 'CMYK') else 'L')
            data = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise FormatError(path, f"unreadable image: {e}")
    return data[None] if data.ndim == 2 else np.transpose(data, (2, 0, 1))


def write_image(path: PathLike, img):
    """Write PFMX losslessly, anything else as 8-bit through Pillow (PGM for 1 channel, PPM for 3)."""
    path = Path(path)
    img = _as_chw(img)
    if path.suffix.lower() == '.pfmx':
        _write_pfmx(path, img)
        return
    if img.shape[0] not in (1, 3):
        raise DimensionError(f"8-bit images need 1 or 3 channels, got {img.shape[0]}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.shape[0] == 1:
        Image.fromarray(data[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(np.transpose(data, (1, 2, 0)))).save(path)


def image_suffix(channels: int, image_format: str = 'pnm') -> str:
    if image_format == 'pfmx':
        return '.pfmx'
    return '.pgm' if channels == 1 else '.ppm'


# ---------------------------------------------------------------------------
# dataset pairs
# ---------------------------------------------------------------------------

def _find_image(directory: Path, stem: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = directory / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    raise FormatError(directory / stem, f"no image found (tried {', '.join(IMAGE_EXTENSIONS)})")


def save_pair(pair: DatasetPair, directory: PathLike, image_format: str = 'pfmx') -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = image_suffix(pair.y.shape[0], image_format)
    write_image(directory / f"x_gt{suffix}", pair.x_gt)
    write_image(directory / f"y{suffix}", pair.y)
    write_kernel(directory / 'k_gt.txt', pair.k_gt)
    write_key_value(directory / 'pair.txt', {
        'sigma': pair.sigma,
        'seed': pair.seed,
        'kernel_size': pair.kernel_size,
        'channels': pair.y.shape[0],
        'image_format': suffix.lstrip('.'),
    })
    logger.info(f"Saved pair to {directory}")
    return directory


def load_pair(directory: PathLike) -> DatasetPair:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(directory, "pair directory not found")
    k_gt = read_kernel(directory / 'k_gt.txt')
    x_gt = read_image(_find_image(directory, 'x_gt'))
    y = read_image(_find_image(directory, 'y'))

    sigma: Optional[float] = None
    seed: Optional[int] = None
    sidecar = directory / 'pair.txt'
    if sidecar.exists():
        meta = read_key_value(sidecar)
        try:
            sigma = float(meta['sigma']) if meta.get('sigma') else None
            seed = int(meta['seed']) if meta.get('seed') else None
        except ValueError as e:
            raise FormatError(sidecar, str(e), field='sigma/seed')
    if sigma is None:
        sigma = estimate_sigma(y)
        logger.info(f"{directory.name}: no recorded sigma, estimated {sigma:.5f}")
    return DatasetPair(x_gt=x_gt, k_gt=k_gt, y=y, sigma=sigma, seed=seed, name=directory.name)


def list_pairs(root: PathLike) -> List[Path]:
    """Sub-directories of root holding a k_gt.txt, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(root, "dataset directory not found")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / 'k_gt.txt').exists())
