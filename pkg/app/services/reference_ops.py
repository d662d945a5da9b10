"""Direct nested-loop convolutions used as test oracles.

Float oracles accumulate in Python floats (double precision) and round to
float32 once per output element. The integer oracle accumulates in Python
ints, which never overflow.
"""
import math

import numpy as np

from app.core.errors import ConfigError, NumericFaultError
from app.services.tensor_ops import (
    ConvWeights,
    Tensor,
    _check_kernel,
    conv_output_size,
    deconv_output_size,
)

INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


def _conv_sums(x: np.ndarray, w: ConvWeights, zero) -> list:
    _check_kernel(w.kernel)
    n, c, h, wd = x.shape
    c_out, cig, kh, kw = w.kernel.shape
    g = w.groups
    sy, sx = w.stride
    py, px = w.padding
    if c != g * cig or c_out % g:
        raise ConfigError(f"channel mismatch: input c={c}, groups={g}, kernel {w.kernel.shape}")
    ho = conv_output_size(h, kh, sy, py)
    wo = conv_output_size(wd, kw, sx, px)
    if ho < 1 or wo < 1:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input")
    cog = c_out // g
    xs = x.tolist()
    ks = w.kernel.tolist()
    bias = None if w.bias is None else w.bias.tolist()
    out = [[[[zero] * wo for _ in range(ho)] for _ in range(c_out)] for _ in range(n)]
    for b in range(n):
        for co in range(c_out):
            grp = co // cog
            base = zero if bias is None else bias[co]
            for oy in range(ho):
                for ox in range(wo):
                    acc = base
                    for ci in range(cig):
                        plane = xs[b][grp * cig + ci]
                        kern = ks[co][ci]
                        for i in range(kh):
                            iy = oy * sy + i - py
                            if iy < 0 or iy >= h:
                                continue
                            row = plane[iy]
                            for j in range(kw):
                                ix = ox * sx + j - px
                                if 0 <= ix < wd:
                                    acc += row[ix] * kern[i][j]
                    out[b][co][oy][ox] = acc
    return out


def _deconv_sums(x: np.ndarray, w: ConvWeights, zero) -> list:
    _check_kernel(w.kernel)
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
    acc = [[[[zero] * wo for _ in range(ho)] for _ in range(c_out)] for _ in range(n)]
    xs = x.tolist()
    ks = w.kernel.tolist()
    for b in range(n):
        for ci in range(c_in):
            for iy in range(h):
                for ix in range(wd):
                    v = xs[b][ci][iy][ix]
                    for co in range(c_out):
                        kern = ks[ci][co]
                        plane = acc[b][co]
                        for i in range(kh):
                            oy = iy * sy + i - py
                            if oy < 0 or oy >= ho:
                                continue
                            for j in range(kw):
                                ox = ix * sx + j - px
                                if 0 <= ox < wo:
                                    plane[oy][ox] += v * kern[i][j]
    if w.bias is not None:
        bias = w.bias.tolist()
        for b in range(n):
            for co in range(c_out):
                acc[b][co] = [[v + bias[co] for v in row] for row in acc[b][co]]
    return acc


def reference_conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    return np.asarray(_conv_sums(x, w, 0.0), dtype=np.float64).astype(np.float32)


def reference_deconv2d(x: Tensor, w: ConvWeights) -> Tensor:
    return np.asarray(_deconv_sums(x, w, 0.0), dtype=np.float64).astype(np.float32)


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def reference_quantized_conv2d(
    x_q: np.ndarray,
    w_q: ConvWeights,
    multiplier: float,
    transposed: bool = False,
) -> np.ndarray:
    """Integer-exact oracle: int accumulation, float64 requantize, half-away rounding."""
    sums = (_deconv_sums if transposed else _conv_sums)(x_q.astype(np.int64), w_q, 0)
    flat = np.asarray(sums, dtype=object)
    out = np.zeros(flat.shape, dtype=np.int8)
    for idx, acc in np.ndenumerate(flat):
        if not INT32_MIN <= acc <= INT32_MAX:
            raise NumericFaultError(f"int32 accumulator overflow at output {idx}")
        out[idx] = max(-127, min(127, _round_half_away(acc * multiplier)))
    return out
