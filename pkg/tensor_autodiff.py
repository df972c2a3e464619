"""
Dense tensor engine with reverse-mode automatic differentiation.

Supplies every operation the two generator networks and the deblurring
objective need: convolution (direct and FFT), bilinear 2x upsampling,
fully-connected layers, activations, per-channel normalization and the
elementwise/reduction plumbing in between.

Operations record themselves on a Tape when at least one input is tracked;
on untracked inputs they are plain numpy computations.  Convolution is
cross-correlation (weights are not flipped).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.special import expit

from deblur_errors import ContractViolation, DimensionError

logger = logging.getLogger(__name__)

PRECISIONS = {'single': np.float32, 'double': np.float64}

# Fixed-order reductions (einsum without BLAS) when set.
_STRICT_DETERMINISTIC = False


def set_deterministic(flag: bool) -> None:
    """Switch the engine between BLAS contractions and fixed-order einsum."""
    global _STRICT_DETERMINISTIC
    _STRICT_DETERMINISTIC = bool(flag)


def is_deterministic() -> bool:
    return _STRICT_DETERMINISTIC


class Tensor:
    """N-dimensional real array, optionally bound to a node of a Tape."""

    __slots__ = ('data', 'tape', 'node')

    def __init__(self, data, tape: Optional['Tape'] = None, node: Optional[int] = None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def precision(self) -> str:
        return 'single' if self.data.dtype == np.float32 else 'double'

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class TapeNode:
    op: str
    parents: Tuple[Optional[int], ...]
    backward: Optional[Callable]
    shape: Tuple[int, ...]


class Tape:
    """Ordered record of operations; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._leaves: Dict[int, Tuple['ParamStore', str]] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def variable(self, array, name: str = 'input') -> Tensor:
        """Register a leaf whose gradient is wanted."""
        data = np.asarray(array)
        idx = self._append(TapeNode(f'leaf:{name}', (), None, data.shape))
        return Tensor(data, self, idx)

    def watch(self, store: 'ParamStore') -> Dict[str, Tensor]:
        """Bind every parameter of a store as a leaf; backward() writes its grads back."""
        bound = {}
        for name, value in store.items():
            leaf = self.variable(value, name)
            self._leaves[leaf.node] = (store, name)
            bound[name] = leaf
        return bound

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        """Append an op node if any input is tracked, otherwise return a plain tensor.

        backward(grad_out, needs) returns one gradient (or None) per input;
        needs[i] tells whether input i is tracked.
        """
        tape = None
        for t in inputs:
            if t.tape is not None:
                if tape is not None and t.tape is not tape:
                    raise ContractViolation(f"{op}: inputs belong to different tapes")
                tape = t.tape
        if tape is None:
            return Tensor(out)
        parents = tuple(t.node if t.tape is not None else None for t in inputs)
        idx = tape._append(TapeNode(op, parents, backward, out.shape))
        return Tensor(out, tape, idx)

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        if loss.tape is not self:
            raise ContractViolation("loss tensor is not recorded on this tape")
        if loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node] = np.ones(loss.shape, dtype=loss.data.dtype)

        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            needs = tuple(p is not None for p in node.parents)
            parent_grads = node.backward(g, needs)
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                if pg.shape != self.nodes[parent].shape:
                    raise DimensionError(
                        f"{node.op}: gradient shape {pg.shape} != parent shape {self.nodes[parent].shape}")
                # fan-out accumulation
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

        self.gradients = {i: g for i, g in enumerate(grads) if g is not None}
        for idx, (store, name) in self._leaves.items():
            g = self.gradients.get(idx)
            store.grads[name] = g if g is not None else np.zeros_like(store[name])
        return self.gradients

    def gradient(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self.gradients.get(tensor.node)


class ParamStore:
    """Named trainable arrays, each paired with a gradient slot of the same shape."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name: {name}")
        array = np.array(value, dtype=self.dtype)
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value):
        if name not in self.params:
            raise ContractViolation(f"unknown parameter: {name}")
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.params[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name] = value

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self.params.items()

    def zero_grad(self):
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> 'ParamStore':
        other = ParamStore(dtype)
        for name, value in self.params.items():
            other.add(name, value)
        return other

    def copy(self) -> 'ParamStore':
        return self.astype(self.dtype)

    def constants(self) -> Dict[str, Tensor]:
        """Untracked views of the parameters (forward evaluation without a tape)."""
        return {name: Tensor(value) for name, value in self.params.items()}


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss; fills the grads of every watched ParamStore."""
    return tape.backward(loss)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape('add', a, b)
    return _record('add', a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape('sub', a, b)
    return _record('sub', a.data - b.data, (a, b), lambda g, needs: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape('mul', a, b)

    def _backward(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return _record('mul', a.data * b.data, (a, b), _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _record('scale', a.data * f, (a,), lambda g, needs: (g * f,))


def square(a: Tensor) -> Tensor:
    return _record('square', a.data * a.data, (a,), lambda g, needs: (2 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record('sqrt', out, (a,), lambda g, needs: (g / (2 * out),))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(())
    return _record('sum', out, (a,), lambda g, needs: (np.full(a.shape, g, dtype=a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.dtype.type(a.size)
    out = np.asarray(a.data.sum() / n, dtype=a.data.dtype).reshape(())
    return _record('mean', out, (a,), lambda g, needs: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _record('reshape', a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis (channel axis by default)."""
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g, needs):
        parts = []
        for i, need in enumerate(needs):
            if not need:
                parts.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            parts.append(g[tuple(index)])
        return tuple(parts)

    return _record('concat', out, tuple(tensors), _backward)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window of a C×H×W tensor."""
    _, h, w = _require_chw('crop2d', a)
    if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
        raise DimensionError(f"crop2d: window ({top},{left},{height},{width}) outside {a.shape}")
    out = a.data[:, top:top + height, left:left + width]

    def _backward(g, needs):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, top:top + height, left:left + width] = g
        return (full,)

    return _record('crop2d', out, (a,), _backward)


def select_channels(a: Tensor, start: int, stop: int) -> Tensor:
    c, _, _ = _require_chw('select_channels', a)
    if not 0 <= start < stop <= c:
        raise DimensionError(f"select_channels: [{start},{stop}) outside {c} channels")
    out = a.data[start:stop]

    def _backward(g, needs):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record('select_channels', out, (a,), _backward)


def flip2d(a: Tensor) -> Tensor:
    """Reverse the last two axes."""
    return _record('flip2d', a.data[..., ::-1, ::-1].copy(), (a,),
                   lambda g, needs: (g[..., ::-1, ::-1].copy(),))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv2d(input: Tensor, weight: Tensor, stride: int = 1, pad: str = 'valid',
           bias: Optional[Tensor] = None, method: str = 'direct') -> Tensor:
    """2D cross-correlation: C_in×H×W with C_out×C_in×kh×kw -> C_out×H_out×W_out.

    pad is 'valid' or 'reflect-same'; method 'fft' is available for stride 1.
    """
    c_in, _, _ = _require_chw('conv2d', input)
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D, got {weight.shape}")
    c_out, w_cin, kh, kw = weight.shape
    if w_cin != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, weight expects {w_cin}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    if pad == 'reflect-same':
        input = pad_reflect(input, (kh - 1) // 2, kh - 1 - (kh - 1) // 2,
                            (kw - 1) // 2, kw - 1 - (kw - 1) // 2)
    elif pad != 'valid':
        raise DimensionError(f"conv2d: unknown padding '{pad}'")

    _, hp, wp = input.shape
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    if method == 'fft':
        if stride != 1:
            raise DimensionError("conv2d: the FFT path supports stride 1 only")
        out = _conv2d_fft(input, weight)
    elif method == 'direct':
        out = _conv2d_direct(input, weight, stride)
    else:
        raise DimensionError(f"conv2d: unknown method '{method}'")

    if bias is not None:
        out = add_channel_bias(out, bias)
    return out


def _conv2d_direct(x: Tensor, w: Tensor, stride: int) -> Tensor:
    c_out, c_in, kh, kw = w.shape
    _, hp, wp = x.shape
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    cols = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :h_out, :w_out]

    if _STRICT_DETERMINISTIC:
        out = np.einsum('ocab,cijab->oij', w.data, cols, optimize=False)
    else:
        out = np.tensordot(w.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    def _backward(g, needs):
        grad_x = grad_w = None
        if needs[1]:
            if _STRICT_DETERMINISTIC:
                grad_w = np.einsum('oij,cijab->ocab', g, cols, optimize=False)
            else:
                grad_w = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
            grad_w = grad_w.astype(w.data.dtype, copy=False)
        if needs[0]:
            if _STRICT_DETERMINISTIC:
                contrib = np.einsum('ocab,oij->cabij', w.data, g, optimize=False)
            else:
                contrib = np.tensordot(w.data, g, axes=([0], [0]))
            grad_x = np.zeros(x.shape, dtype=x.data.dtype)
            for a in range(kh):
                for b in range(kw):
                    grad_x[:, a:a + stride * h_out:stride, b:b + stride * w_out:stride] += contrib[:, a, b]
        return grad_x, grad_w

    return _record('conv2d', out, (x, w), _backward)


def _conv2d_fft(x: Tensor, w: Tensor) -> Tensor:
    c_out, c_in, kh, kw = w.shape
    _, hp, wp = x.shape
    out = np.zeros((c_out, hp - kh + 1, wp - kw + 1), dtype=x.data.dtype)
    for o in range(c_out):
        for c in range(c_in):
            out[o] += signal.correlate(x.data[c], w.data[o, c], mode='valid', method='fft')

    def _backward(g, needs):
        grad_x = grad_w = None
        if needs[0]:
            grad_x = np.zeros(x.shape, dtype=x.data.dtype)
            for o in range(c_out):
                for c in range(c_in):
                    grad_x[c] += signal.fftconvolve(g[o], w.data[o, c], mode='full')
        if needs[1]:
            grad_w = np.zeros(w.shape, dtype=w.data.dtype)
            for o in range(c_out):
                for c in range(c_in):
                    grad_w[o, c] = signal.correlate(x.data[c], g[o], mode='valid', method='fft')
        return grad_x, grad_w

    return _record('conv2d_fft', out, (x, w), _backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    out = x.data + bias.data[:, None, None]
    return _record('channel_bias', out, (x, bias), lambda g, needs: (g, g.sum(axis=(1, 2))))


def _separable(op: str, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[c] = rows @ x[c] @ cols.T, a linear map applied along both spatial axes."""
    rows = rows.astype(x.data.dtype)
    cols = cols.astype(x.data.dtype)
    if _STRICT_DETERMINISTIC:
        out = np.einsum('ph,chw,qw->cpq', rows, x.data, cols, optimize=False)
    else:
        out = np.matmul(np.matmul(rows, x.data), cols.T)

    def _backward(g, needs):
        if _STRICT_DETERMINISTIC:
            return (np.einsum('ph,cpq,qw->chw', rows, g, cols, optimize=False),)
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _record(op, np.ascontiguousarray(out), (x,), _backward)


def _reflect_matrix(n: int, before: int, after: int) -> np.ndarray:
    if n == 1:
        index = np.zeros(n + before + after, dtype=int)
    else:
        index = np.pad(np.arange(n), (before, after), mode='reflect')
    matrix = np.zeros((n + before + after, n))
    matrix[np.arange(index.size), index] = 1.0
    return matrix


def pad_reflect(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    _, h, w = _require_chw('pad_reflect', x)
    if h > 1 and max(top, bottom) >= h or w > 1 and max(left, right) >= w:
        raise DimensionError(f"pad_reflect: padding ({top},{bottom},{left},{right}) too large for {x.shape}")
    return _separable('pad_reflect', x, _reflect_matrix(h, top, bottom), _reflect_matrix(w, left, right))


def _upsample_matrix(n: int) -> np.ndarray:
    matrix = np.zeros((2 * n, n))
    for i in range(2 * n):
        coord = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(coord))
        i1 = min(i0 + 1, n - 1)
        frac = coord - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


def upsample_bilinear2x(input: Tensor) -> Tensor:
    """C×H×W -> C×2H×2W, half-pixel centers with edge clamping."""
    _, h, w = _require_chw('upsample_bilinear2x', input)
    return _separable('upsample_bilinear2x', input, _upsample_matrix(h), _upsample_matrix(w))


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """output_i = sum_j weight_ij * input_j + bias_i"""
    if input.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(f"linear: expected (n), (m,n), (m); got {input.shape}, {weight.shape}, {bias.shape}")
    m, n = weight.shape
    if input.shape[0] != n or bias.shape[0] != m:
        raise DimensionError(f"linear: input {input.shape} / bias {bias.shape} do not fit weight {weight.shape}")
    if _STRICT_DETERMINISTIC:
        out = np.einsum('mn,n->m', weight.data, input.data, optimize=False) + bias.data
    else:
        out = weight.data @ input.data + bias.data

    def _backward(g, needs):
        grad_in = weight.data.T @ g if needs[0] else None
        grad_w = np.outer(g, input.data) if needs[1] else None
        return grad_in, grad_w, g

    return _record('linear', out.astype(input.data.dtype, copy=False), (input, weight, bias), _backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = x.data.dtype.type(slope)
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * s)
    return _record('leaky_relu', out, (x,), lambda g, needs: (np.where(positive, g, g * s),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.data.dtype, copy=False)
    return _record('sigmoid', out, (x,), lambda g, needs: (g * out * (1 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over all entries, treated as one flat vector; output keeps the input shape."""
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    out = e / e.sum()
    return _record('softmax', out, (x,), lambda g, needs: (out * (g - np.sum(g * out)),))


def activation(input: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == 'leaky_relu':
        return leaky_relu(input, slope)
    if kind == 'sigmoid':
        return sigmoid(input)
    if kind == 'softmax':
        return softmax(input)
    raise ContractViolation(f"unknown activation '{kind}'")


def channel_norm(input: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel by its own spatial mean/variance, then gain and shift."""
    if eps <= 0:
        raise ContractViolation(f"channel_norm: eps must be > 0, got {eps}")
    c, h, w = _require_chw('channel_norm', input)
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"channel_norm: gain/shift must have shape ({c},)")
    x = input.data
    n = x.dtype.type(h * w)
    mu = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = gain.data[:, None, None] * xhat + shift.data[:, None, None]

    def _backward(g, needs):
        grad_x = None
        if needs[0]:
            gx_hat = g * gain.data[:, None, None]
            grad_x = (inv_std / n) * (n * gx_hat
                                      - gx_hat.sum(axis=(1, 2), keepdims=True)
                                      - xhat * (gx_hat * xhat).sum(axis=(1, 2), keepdims=True))
        grad_gain = (g * xhat).sum(axis=(1, 2)) if needs[1] else None
        grad_shift = g.sum(axis=(1, 2)) if needs[2] else None
        return grad_x, grad_gain, grad_shift

    return _record('channel_norm', out.astype(x.dtype, copy=False), (input, gain, shift), _backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

InputsLike = Union[Sequence[np.ndarray], 'ParamStore']


def gradcheck(fn: Callable, point: InputsLike, step: float = 1e-5, seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    fn receives Tensors (positionally, or as a name->Tensor dict when point is a
    ParamStore) and returns a Tensor.  Non-scalar outputs are contracted with a
    fixed random projection.  Relative error uses max(|a|, |b|, floor) as denominator.
    """
    if step <= 0:
        raise ContractViolation(f"gradcheck: step must be > 0, got {step}")

    if isinstance(point, ParamStore):
        names = point.names()
        arrays = [np.array(point[n], dtype=np.float64) for n in names]

        def call(tensors):
            return fn(dict(zip(names, tensors)))
    else:
        arrays = [np.array(a, dtype=np.float64) for a in point]

        def call(tensors):
            return fn(*tensors)

    projection = None

    def scalar_of(tensors) -> Tensor:
        nonlocal projection
        out = call(tensors)
        if projection is None:
            rng = np.random.default_rng(seed)
            projection = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        return sum_all(mul(out, Tensor(projection)))

    tape = Tape()
    leaves = [tape.variable(a, f'p{i}') for i, a in enumerate(arrays)]
    loss = scalar_of(leaves)
    tape.backward(loss)
    analytic = [tape.gradient(leaf) if tape.gradient(leaf) is not None else np.zeros_like(a)
                for leaf, a in zip(leaves, arrays)]

    worst = 0.0
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            f_plus = scalar_of([Tensor(a) for a in arrays]).item()
            flat[j] = original - step
            f_minus = scalar_of([Tensor(a) for a in arrays]).item()
            flat[j] = original
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    logger.debug(f"gradcheck: {sum(a.size for a in arrays)} coordinates, max relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    for t in inputs:
        if t.tape is not None:
            return t.tape.record(op, out, inputs, backward)
    return Tensor(out)


def _require_chw(op: str, t: Tensor) -> Tuple[int, int, int]:
    if t.data.ndim != 3:
        raise DimensionError(f"{op}: expected a C×H×W tensor, got shape {t.shape}")
    return t.shape


def tensor(data, precision: str = 'double') -> Tensor:
    """Untracked tensor of the given precision."""
    if precision not in PRECISIONS:
        raise ContractViolation(f"unknown precision '{precision}'")
    return Tensor(np.asarray(data, dtype=PRECISIONS[precision]))
