"""Layer vocabulary as pure functions on NCHW float32 tensors.

Convolutions accumulate one kernel position at a time (kernel-position-major),
each position contributing a grouped matmul over input channels. The
accumulation order is fixed, so results do not depend on how callers
parallelise over batch items.
"""
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from app.core.errors import ConfigError, NumericFaultError, UnsupportedLayerError

Tensor = npt.NDArray[np.float32]

SUPPORTED_KERNELS = (1, 3, 4, 5)


@dataclass(frozen=True)
class ConvWeights:
    """Convolution parameters.

    For conv2d the kernel is (c_out, c_in / groups, kh, kw). For deconv2d it is
    (c_in, c_out, kh, kw), the layout of the adjoint convolution, so the same
    array read as conv weights gives the transposed operator.
    """
    kernel: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    def scale(self) -> np.ndarray:
        return (self.gamma / np.sqrt(self.running_var + self.eps)).astype(np.float32)


def as_tensor(data, name: str = "input") -> Tensor:
    """Validate external data as a finite 4-D float32 tensor."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 4:
        raise ConfigError(f"{name}: expected 4-D (n, c, h, w) tensor, got {arr.ndim}-D")
    if not np.all(np.isfinite(arr)):
        raise NumericFaultError(f"{name}: tensor contains NaN or Inf")
    return arr


def _check_kernel(kernel: np.ndarray):
    if kernel.ndim != 4:
        raise ConfigError(f"kernel must be 4-D, got shape {kernel.shape}")
    kh, kw = kernel.shape[2:]
    if kh not in SUPPORTED_KERNELS or kw not in SUPPORTED_KERNELS:
        raise UnsupportedLayerError(f"kernel size {kh}x{kw} outside supported {SUPPORTED_KERNELS}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def conv2d(x: Tensor, w: ConvWeights, acc_dtype=np.float32) -> Tensor:
    """`acc_dtype` sets the accumulator; float64 keeps integer-valued sums exact."""
    _check_kernel(w.kernel)
    x = x.astype(acc_dtype, copy=False)
    n, c, h, wd = x.shape
    c_out, cig, kh, kw = w.kernel.shape
    g = w.groups
    sy, sx = w.stride
    py, px = w.padding
    if sy < 1 or sx < 1:
        raise ConfigError(f"stride must be >= 1, got {w.stride}")
    if c_out % g:
        raise ConfigError(f"c_out={c_out} not divisible by groups={g}")
    if c != g * cig:
        raise ConfigError(f"channel mismatch: input c={c}, groups*c_in_per_group={g * cig}")
    ho = conv_output_size(h, kh, sy, py)
    wo = conv_output_size(wd, kw, sx, px)
    if ho < 1 or wo < 1:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {h + 2 * py}x{wd + 2 * px}")

    xp = np.pad(x, ((0, 0), (0, 0), (py, py), (px, px))) if (py or px) else x
    xg = xp.reshape(n, g, cig, xp.shape[2], xp.shape[3])
    kg = w.kernel.astype(acc_dtype).reshape(g, c_out // g, cig, kh, kw)
    out = np.zeros((n, g, c_out // g, ho * wo), dtype=acc_dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, i:i + sy * (ho - 1) + 1:sy, j:j + sx * (wo - 1) + 1:sx]
            out += np.matmul(kg[:, :, :, i, j], patch.reshape(n, g, cig, ho * wo))
    out = out.reshape(n, c_out, ho, wo)
    if w.bias is not None:
        out += w.bias.astype(acc_dtype).reshape(1, c_out, 1, 1)
    return out


def deconv2d(x: Tensor, w: ConvWeights, acc_dtype=np.float32) -> Tensor:
    """Transposed convolution: scatter each input pixel through the kernel."""
    _check_kernel(w.kernel)
    x = x.astype(acc_dtype, copy=False)
    if w.groups != 1:
        raise UnsupportedLayerError("grouped transposed convolution is not supported")
    n, c, h, wd = x.shape
    c_in, c_out, kh, kw = w.kernel.shape
    sy, sx = w.stride
    py, px = w.padding
    if c != c_in:
        raise ConfigError(f"channel mismatch: input c={c}, deconv c_in={c_in}")
    ho = deconv_output_size(h, kh, sy, py)
    wo = deconv_output_size(wd, kw, sx, px)
    if ho < 1 or wo < 1:
        raise ConfigError(f"negative deconv output size {ho}x{wo}")

    full_h = (h - 1) * sy + kh
    full_w = (wd - 1) * sx + kw
    full = np.zeros((n, c_out, full_h, full_w), dtype=acc_dtype)
    xm = x.reshape(n, c_in, h * wd)
    kt = np.ascontiguousarray(w.kernel.astype(acc_dtype).transpose(2, 3, 1, 0))  # kh, kw, c_out, c_in
    for i in range(kh):
        for j in range(kw):
            contrib = np.matmul(kt[i, j], xm).reshape(n, c_out, h, wd)
            full[:, :, i:i + sy * (h - 1) + 1:sy, j:j + sx * (wd - 1) + 1:sx] += contrib
    out = np.ascontiguousarray(full[:, :, py:py + ho, px:px + wo])
    if w.bias is not None:
        out += w.bias.astype(acc_dtype).reshape(1, c_out, 1, 1)
    return out


def batchnorm_inference(x: Tensor, p: BnParams) -> Tensor:
    if p.channels != x.shape[1]:
        raise ConfigError(f"batchnorm expects {p.channels} channels, input has {x.shape[1]}")
    if np.any(p.running_var < 0):
        raise ConfigError("batchnorm running_var must be non-negative")
    scale = p.scale().reshape(1, -1, 1, 1)
    mean = p.running_mean.astype(np.float32).reshape(1, -1, 1, 1)
    beta = p.beta.astype(np.float32).reshape(1, -1, 1, 1)
    return ((x - mean) * scale + beta).astype(np.float32)


def fuse_conv_bn(w: ConvWeights, p: BnParams, transposed: bool = False) -> ConvWeights:
    """Fold inference batch norm into the preceding (de)convolution."""
    out_axis = 1 if transposed else 0
    c_out = w.kernel.shape[out_axis]
    if c_out != p.channels:
        raise ConfigError(f"cannot fuse: conv has {c_out} output channels, batchnorm {p.channels}")
    scale = p.scale()
    shape = [1, 1, 1, 1]
    shape[out_axis] = c_out
    kernel = (w.kernel * scale.reshape(shape)).astype(np.float32)
    bias = w.bias if w.bias is not None else np.zeros(c_out, dtype=np.float32)
    bias = ((bias - p.running_mean) * scale + p.beta).astype(np.float32)
    return ConvWeights(kernel=kernel, bias=bias, groups=w.groups, stride=w.stride, padding=w.padding)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(np.float32)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0 <= slope < 1:
        raise ConfigError(f"leaky_relu slope must be in [0, 1), got {slope}")
    return np.where(x < 0, x * np.float32(slope), x).astype(np.float32)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ConfigError(f"softmax axis {axis} invalid for {x.ndim}-D tensor")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(np.float32)


def _pool_windows(x: Tensor, k: int, stride: int, pad: int, fill: float):
    if k < 1 or stride < 1:
        raise ConfigError(f"pool kernel and stride must be >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ConfigError(f"pool window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return windows[:, :, ::stride, ::stride][:, :, :ho, :wo]


def maxpool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    windows = _pool_windows(x, k, stride, pad, -np.inf)
    return windows.max(axis=(-2, -1)).astype(np.float32)


def avgpool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Average over in-bounds elements only (padding is not counted)."""
    sums = _pool_windows(x, k, stride, pad, 0.0).sum(axis=(-2, -1), dtype=np.float64)
    ones = np.ones((1, 1) + x.shape[2:], dtype=np.float32)
    counts = _pool_windows(ones, k, stride, pad, 0.0).sum(axis=(-2, -1))
    return (sums / counts).astype(np.float32)


def eltwise_sum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"eltwise_sum shape mismatch: {a.shape} vs {b.shape}")
    return (a + b).astype(np.float32)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ConfigError(f"concat input {i} shape {t.shape} incompatible with {ref}")
    return np.concatenate(tensors, axis=axis).astype(np.float32)
