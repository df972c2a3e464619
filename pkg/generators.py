"""
Generator networks for zero-shot blind deconvolution.

G_x: encoder-decoder with skip connections and a terminal Sigmoid, emitting
     the latent sharp image on an enlarged (H+K-1)×(W+K-1) canvas.
G_k: fully-connected network with a terminal SoftMax, emitting a K×K kernel
     on the probability simplex.  A skip-net variant reuses the G_x topology
     for the kernel.

Both networks are randomly initialized from a seed and never pretrained.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from deblur_errors import ConfigurationError, DimensionError
import tensor_autodiff as ad
from tensor_autodiff import ParamStore, Tensor

logger = logging.getLogger(__name__)

GK_VARIANTS = ('no_hidden', 'one_hidden', 'two_hidden', 'skip_net')

# Seed stream ids; one seed fans out into independent generators.
STREAM_Z_X = 1
STREAM_Z_K = 2
STREAM_GX_INIT = 3
STREAM_GK_INIT = 4
STREAM_PERTURB = 5


def seeded_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on (seed, stream)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass
class GxConfig:
    levels: int = 5
    channels_down: List[int] = field(default_factory=lambda: [128] * 5)
    channels_up: List[int] = field(default_factory=lambda: [128] * 5)
    channels_skip: List[int] = field(default_factory=lambda: [16] * 5)
    input_channels: int = 8
    output_channels: int = 1
    conv_kernel: int = 3
    slope: float = 0.2
    norm_eps: float = 1e-5
    head: str = 'sigmoid'

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        for name in ('channels_down', 'channels_up', 'channels_skip'):
            counts = list(getattr(self, name))
            if len(counts) != self.levels:
                raise ConfigurationError(f"{name} needs {self.levels} entries, got {len(counts)}")
            if any(int(c) < 1 for c in counts):
                raise ConfigurationError(f"{name} entries must be >= 1: {counts}")
            setattr(self, name, [int(c) for c in counts])
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigurationError("input_channels and output_channels must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.head not in ('sigmoid', 'softmax'):
            raise ConfigurationError(f"unknown head '{self.head}'")

    @classmethod
    def full(cls, output_channels: int = 1) -> 'GxConfig':
        return cls(output_channels=output_channels)

    @classmethod
    def desk(cls, output_channels: int = 1) -> 'GxConfig':
        return cls(levels=3, channels_down=[16] * 3, channels_up=[16] * 3, channels_skip=[4] * 3,
                   output_channels=output_channels)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class GkConfig:
    kernel_size: int = 31
    z_dim: int = 200
    hidden_dim: int = 1000
    depth_variant: str = 'one_hidden'
    slope: float = 0.2
    # skip_net variant only
    skip_levels: int = 2
    skip_channels: int = 16

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.depth_variant not in GK_VARIANTS:
            raise ConfigurationError(f"depth_variant must be one of {GK_VARIANTS}, got '{self.depth_variant}'")
        if self.z_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("z_dim and hidden_dim must be >= 1")

    @classmethod
    def full(cls, kernel_size: int = 31, **overrides) -> 'GkConfig':
        return cls(kernel_size=kernel_size, **overrides)

    @classmethod
    def desk(cls, kernel_size: int = 31, **overrides) -> 'GkConfig':
        # logit change per ADAM step grows with z_dim * hidden_dim
        values = dict(z_dim=64, hidden_dim=256)
        values.update(overrides)
        return cls(kernel_size=kernel_size, **values)

    @property
    def output_nodes(self) -> int:
        return self.kernel_size ** 2

    def skip_config(self) -> GxConfig:
        n = self.skip_levels
        return GxConfig(levels=n, channels_down=[self.skip_channels] * n, channels_up=[self.skip_channels] * n,
                        channels_skip=[max(1, self.skip_channels // 4)] * n, output_channels=1,
                        head='softmax', slope=self.slope)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class NoiseInputs:
    z_x: np.ndarray
    z_k: np.ndarray
    seed: int
    perturb_std: float = 0.001

    def __post_init__(self):
        if self.perturb_std < 0:
            raise ConfigurationError(f"perturb_std must be >= 0, got {self.perturb_std}")
        self._rng = seeded_rng(self.seed, STREAM_PERTURB)

    def perturbed_z_x(self) -> np.ndarray:
        """z_x0 plus fresh N(0, perturb_std^2) noise; z_k is never perturbed."""
        if self.perturb_std == 0:
            return self.z_x
        eps = self._rng.normal(0.0, self.perturb_std, self.z_x.shape)
        return (self.z_x + eps).astype(self.z_x.dtype)


@dataclass
class GeneratorNet:
    """Parameters plus the pure forward closure of one generator."""
    kind: str
    config: object
    params: ParamStore
    forward_fn: Callable[[Mapping[str, Tensor], Tensor], Tensor]
    z_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]

    def forward(self, params: Optional[Mapping[str, Tensor]], z: Tensor) -> Tensor:
        if params is None:
            params = self.params.constants()
        if tuple(z.shape) != tuple(self.z_shape):
            raise DimensionError(f"{self.kind}: z has shape {z.shape}, network expects {self.z_shape}")
        return self.forward_fn(params, z)


def sample_z(shape, seed: int, stream: int = STREAM_Z_X, dtype=np.float32) -> Tensor:
    """i.i.d. uniform values on [0, 0.1] from the (seed, stream) Philox generator."""
    rng = seeded_rng(seed, stream)
    values = rng.uniform(0.0, 0.1, size=tuple(shape))
    return Tensor(np.clip(values, 0.0, 0.1).astype(dtype))


def _uniform_init(store: ParamStore, rng: np.random.Generator, name: str, shape, fan_in: int):
    bound = np.sqrt(1.0 / fan_in)
    store.add(name, rng.uniform(-bound, bound, size=shape))


def _norm_init(store: ParamStore, name: str, channels: int):
    store.add(f"{name}.gain", np.ones(channels))
    store.add(f"{name}.shift", np.zeros(channels))


def _canvas(size: int, levels: int) -> int:
    step = 2 ** levels
    return ((size + step - 1) // step) * step


def _build_skip_net(cfg: GxConfig, target_hw: Tuple[int, int], seed: int, stream: int,
                    dtype, kind: str) -> GeneratorNet:
    h_t, w_t = int(target_hw[0]), int(target_hw[1])
    if h_t < 1 or w_t < 1:
        raise ConfigurationError(f"{kind}: output size {target_hw} not representable")
    hp, wp = _canvas(h_t, cfg.levels), _canvas(w_t, cfg.levels)
    if hp // 2 ** cfg.levels < 1:
        raise ConfigurationError(f"{kind}: {cfg.levels} levels too deep for output {target_hw}")

    rng = seeded_rng(seed, stream)
    store = ParamStore(dtype)
    k = cfg.conv_kernel
    L = cfg.levels

    for i in range(L):
        c_in = cfg.input_channels if i == 0 else cfg.channels_down[i - 1]
        c_down = cfg.channels_down[i]
        c_skip = cfg.channels_skip[i]
        _uniform_init(store, rng, f"skip{i}.conv.weight", (c_skip, c_in, 1, 1), c_in)
        _norm_init(store, f"skip{i}.norm", c_skip)
        _uniform_init(store, rng, f"down{i}.conv1.weight", (c_down, c_in, k, k), c_in * k * k)
        _norm_init(store, f"down{i}.norm1", c_down)
        _uniform_init(store, rng, f"down{i}.conv2.weight", (c_down, c_down, k, k), c_down * k * k)
        _norm_init(store, f"down{i}.norm2", c_down)

    for i in reversed(range(L)):
        deeper = cfg.channels_up[i + 1] if i < L - 1 else cfg.channels_down[L - 1]
        c_cat = cfg.channels_skip[i] + deeper
        c_up = cfg.channels_up[i]
        _norm_init(store, f"up{i}.norm0", c_cat)
        _uniform_init(store, rng, f"up{i}.conv1.weight", (c_up, c_cat, k, k), c_cat * k * k)
        _norm_init(store, f"up{i}.norm1", c_up)
        _uniform_init(store, rng, f"up{i}.conv2.weight", (c_up, c_up, 1, 1), c_up)
        _norm_init(store, f"up{i}.norm2", c_up)

    c0 = cfg.channels_up[0]
    _uniform_init(store, rng, "head.weight", (cfg.output_channels, c0, 1, 1), c0)
    _uniform_init(store, rng, "head.bias", (cfg.output_channels,), c0)

    slope, eps = cfg.slope, cfg.norm_eps
    top, left = (hp - h_t) // 2, (wp - w_t) // 2

    def block(p, x, name, stride=1, pad='reflect-same'):
        return ad.conv2d(x, p[f"{name}.weight"], stride=stride, pad=pad)

    def norm_act(p, x, name):
        x = ad.channel_norm(x, p[f"{name}.gain"], p[f"{name}.shift"], eps)
        return ad.leaky_relu(x, slope)

    def forward(p: Mapping[str, Tensor], z: Tensor) -> Tensor:
        skips = []
        h = z
        for i in range(L):
            s = block(p, h, f"skip{i}.conv", pad='valid')
            skips.append(norm_act(p, s, f"skip{i}.norm"))
            h = norm_act(p, block(p, h, f"down{i}.conv1", stride=2), f"down{i}.norm1")
            h = norm_act(p, block(p, h, f"down{i}.conv2"), f"down{i}.norm2")
        for i in reversed(range(L)):
            h = ad.concat([skips[i], ad.upsample_bilinear2x(h)])
            h = ad.channel_norm(h, p[f"up{i}.norm0.gain"], p[f"up{i}.norm0.shift"], eps)
            h = norm_act(p, block(p, h, f"up{i}.conv1"), f"up{i}.norm1")
            h = norm_act(p, block(p, h, f"up{i}.conv2", pad='valid'), f"up{i}.norm2")
        h = ad.conv2d(h, p["head.weight"], pad='valid', bias=p["head.bias"])
        h = ad.crop2d(h, top, left, h_t, w_t)
        if cfg.head == 'softmax':
            return ad.reshape(ad.softmax(h), (h_t, w_t))
        return ad.sigmoid(h)

    out_shape = (cfg.output_channels, h_t, w_t) if cfg.head == 'sigmoid' else (h_t, w_t)
    logger.debug(f"{kind}: skip net with {store.num_parameters():,} parameters, canvas {hp}x{wp}")
    return GeneratorNet(kind, cfg, store, forward, (cfg.input_channels, hp, wp), out_shape)


def build_gx(cfg: GxConfig, seed: int, target_hw: Tuple[int, int], dtype=np.float32) -> GeneratorNet:
    """G_x emitting a C×H'×W' image; z_x spatial size is H'×W' padded to a multiple of 2^levels."""
    if cfg.head != 'sigmoid':
        raise ConfigurationError("G_x requires a sigmoid head")
    return _build_skip_net(cfg, target_hw, seed, STREAM_GX_INIT, dtype, 'gx')


def build_gk(cfg: GkConfig, seed: int, dtype=np.float32) -> GeneratorNet:
    """G_k emitting a K×K simplex kernel through a terminal softmax."""
    K = cfg.kernel_size
    if cfg.depth_variant == 'skip_net':
        return _build_skip_net(cfg.skip_config(), (K, K), seed, STREAM_GK_INIT, dtype, 'gk')

    rng = seeded_rng(seed, STREAM_GK_INIT)
    store = ParamStore(dtype)
    n_hidden = {'no_hidden': 0, 'one_hidden': 1, 'two_hidden': 2}[cfg.depth_variant]
    width = cfg.z_dim
    for i in range(n_hidden):
        _uniform_init(store, rng, f"hidden{i}.weight", (cfg.hidden_dim, width), width)
        _uniform_init(store, rng, f"hidden{i}.bias", (cfg.hidden_dim,), width)
        width = cfg.hidden_dim
    _uniform_init(store, rng, "out.weight", (cfg.output_nodes, width), width)
    _uniform_init(store, rng, "out.bias", (cfg.output_nodes,), width)

    def forward(p: Mapping[str, Tensor], z: Tensor) -> Tensor:
        h = z
        for i in range(n_hidden):
            h = ad.leaky_relu(ad.linear(h, p[f"hidden{i}.weight"], p[f"hidden{i}.bias"]), cfg.slope)
        logits = ad.linear(h, p["out.weight"], p["out.bias"])
        return ad.reshape(ad.softmax(logits), (K, K))

    logger.debug(f"gk: {cfg.depth_variant} FCN with {store.num_parameters():,} parameters")
    return GeneratorNet('gk', cfg, store, forward, (cfg.z_dim,), (K, K))


def forward_gx(gx: GeneratorNet, z_x: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    return gx.forward(params, z_x)


def forward_gk(gk: GeneratorNet, z_k: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    return gk.forward(params, z_k)


def make_noise_inputs(gx: GeneratorNet, gk: Optional[GeneratorNet], seed: int,
                      perturb_std: float = 0.001) -> NoiseInputs:
    dtype = gx.params.dtype
    z_x = sample_z(gx.z_shape, seed, STREAM_Z_X, dtype).data
    if gk is not None:
        z_k = sample_z(gk.z_shape, seed, STREAM_Z_K, dtype).data
    else:
        z_k = np.zeros(0, dtype=dtype)
    return NoiseInputs(z_x, z_k, seed, perturb_std)
