"""
Dense rank-4 tensor kernels.

Tensors are float64 numpy arrays laid out (batch, channel, height, width).
Every function here is pure: inputs are never written to and identical inputs
give bit-identical outputs. Contractions use ``numpy.einsum`` without path
optimization, so no BLAS threading decides the summation order.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import THREADS
from tafe.errors import ConfigError, ShapeError

Tensor = np.ndarray

PADDING_MODES = ("same", "valid")

_threads = max(1, THREADS)


def set_threads(count: int):
    """Cap the worker count used by conv2d (and by evaluation)."""
    global _threads
    if count < 1:
        raise ConfigError(f"thread count must be >= 1, got {count}")
    _threads = count


def get_threads() -> int:
    return _threads


def parallel_map(func: Callable, items: Sequence) -> List:
    """Map in order; results come back in input order regardless of workers."""
    if _threads == 1 or len(items) < 2:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(_threads, len(items))) as pool:
        return list(pool.map(func, items))


def as_tensor(x, name: str = "tensor") -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class ConvKernel:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    strip: bool = False

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        if weight.ndim != 4:
            raise ShapeError(f"kernel weight must be (c_out, c_in, kh, kw), got {weight.shape}")
        kh, kw = weight.shape[2], weight.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel sizes must be odd, got {kh}x{kw}")
        if self.strip and kh != 1 and kw != 1:
            raise ShapeError(f"strip kernel must be 1xk or kx1, got {kh}x{kw}")
        object.__setattr__(self, "weight", weight)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if bias.shape[0] != weight.shape[0]:
                raise ShapeError(f"bias length {bias.shape[0]} != c_out {weight.shape[0]}")
            object.__setattr__(self, "bias", bias)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def is_strip(self) -> bool:
        kh, kw = self.size
        return kh == 1 or kw == 1


def _padding_for(kh: int, kw: int, padding: str) -> Tuple[int, int]:
    if padding not in PADDING_MODES:
        raise ConfigError(f"unknown padding mode {padding!r}")
    if padding == "valid":
        return 0, 0
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"same padding needs odd kernel sizes, got {kh}x{kw}")
    return (kh - 1) // 2, (kw - 1) // 2


def conv_output_size(h: int, w: int, kh: int, kw: int, padding: str, stride: int) -> Tuple[int, int]:
    ph, pw = _padding_for(kh, kw, padding)
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with {padding} padding")
    return oh, ow


def _window(xp: np.ndarray, a: int, b: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return xp[:, :, a:a + stride * (oh - 1) + 1:stride, b:b + stride * (ow - 1) + 1:stride]


def _conv_sample(xp: np.ndarray, weight: np.ndarray, oh: int, ow: int, stride: int) -> np.ndarray:
    kh, kw = weight.shape[2], weight.shape[3]
    out = np.zeros((1, weight.shape[0], oh, ow))
    for a in range(kh):
        for b in range(kw):
            out += np.einsum("oc,nchw->nohw", weight[:, :, a, b], _window(xp, a, b, oh, ow, stride))
    return out


def conv2d_raw(
    x: Tensor,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    padding: str = "same",
    stride: int = 1
) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding."""
    x = as_tensor(x, "conv2d input")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    kh, kw = weight.shape[2], weight.shape[3]
    ph, pw = _padding_for(kh, kw, padding)
    oh, ow = conv_output_size(x.shape[2], x.shape[3], kh, kw, padding, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    # One sample per task: the per-element reduction order never depends on the split
    parts = parallel_map(
        lambda i: _conv_sample(xp[i:i + 1], weight, oh, ow, stride),
        range(x.shape[0])
    )
    out = np.concatenate(parts, axis=0)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv2d(x: Tensor, kernel: ConvKernel, padding: str = "same", stride: int = 1) -> Tensor:
    return conv2d_raw(x, kernel.weight, kernel.bias, padding=padding, stride=stride)


def conv2d_backward(
    x: Tensor,
    weight: np.ndarray,
    grad_out: Tensor,
    padding: str = "same",
    stride: int = 1
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Adjoint of conv2d_raw: gradients for input, weight and bias."""
    kh, kw = weight.shape[2], weight.shape[3]
    ph, pw = _padding_for(kh, kw, padding)
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    def sample(i):
        xs = xp[i:i + 1]
        g = grad_out[i:i + 1]
        gxp = np.zeros_like(xs)
        gw = np.zeros_like(weight)
        for a in range(kh):
            for b in range(kw):
                window = _window(xs, a, b, oh, ow, stride)
                gw[:, :, a, b] = np.einsum("nohw,nchw->oc", g, window)
                _window(gxp, a, b, oh, ow, stride)[...] += np.einsum("oc,nohw->nchw", weight[:, :, a, b], g)
        return gxp, gw

    parts = parallel_map(sample, range(x.shape[0]))
    gxp = np.concatenate([p[0] for p in parts], axis=0)
    grad_weight = np.zeros_like(weight)
    for _, gw in parts:
        grad_weight += gw
    grad_x = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_weight, grad_bias


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return a * b


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, stabilized by max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Normalize each token over its trailing feature axis, then apply gamma/beta."""
    return layernorm_stats(x, gamma, beta, eps)[0]


def layernorm_stats(x, gamma, beta, eps):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: feature size {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gamma + beta, x_hat, inv_std


def layernorm_backward(x_hat, inv_std, gamma, grad_out):
    axes = tuple(range(grad_out.ndim - 1))
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    g = grad_out * gamma
    grad_x = inv_std * (
        g - g.mean(axis=-1, keepdims=True) - x_hat * (g * x_hat).mean(axis=-1, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (dst, src)."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    for o in range(dst):
        # integer numerator keeps corner and same-size positions exact
        pos = o * (src - 1) / (dst - 1)
        i0 = min(int(np.floor(pos)), src - 1)
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x, "upsample input")
    if out_h < x.shape[2] or out_w < x.shape[3]:
        raise ConfigError(
            f"upsample_bilinear cannot downscale {x.shape[2]}x{x.shape[3]} to {out_h}x{out_w}"
        )
    mh = interpolation_matrix(x.shape[2], out_h)
    mw = interpolation_matrix(x.shape[3], out_w)
    rows = np.einsum("oh,nchw->ncow", mh, x)
    return np.einsum("pw,ncow->ncop", mw, rows)


def upsample_bilinear_adjoint(grad_out: Tensor, in_h: int, in_w: int) -> Tensor:
    mh = interpolation_matrix(in_h, grad_out.shape[2])
    mw = interpolation_matrix(in_w, grad_out.shape[3])
    cols = np.einsum("pw,ncop->ncow", mw, grad_out)
    return np.einsum("oh,ncow->nchw", mh, cols)
