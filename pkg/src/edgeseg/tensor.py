"""Dense NCHW kernels and their vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width).  Execution uses float32; every kernel
preserves the dtype of its inputs so the gradient checker can run the same
code in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    RELU6 = "relu6"
    SIGMOID = "sigmoid"
    HARD_SIGMOID = "hard_sigmoid"
    HARD_SWISH = "hard_swish"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ConvParams:
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel must be positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive, got {self.groups}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=dtype)


def _check_rank4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} does not match {b.shape}")


# ---------------------------------------------------------------- convolution


def _conv_geometry(x: np.ndarray, w: np.ndarray, p: ConvParams):
    _check_rank4(x)
    _check_rank4(w, "weights")
    n, c, h, wd = x.shape
    c_out, c_per_group, kh, kw = w.shape
    g = p.groups
    if (kh, kw) != tuple(p.kernel):
        raise ShapeError(f"kernel size: weights are {kh}x{kw} but params say {p.kernel}")
    if c % g:
        raise ShapeError(f"C_in={c} is not divisible by groups={g}")
    if c_out % g:
        raise ShapeError(f"C_out={c_out} is not divisible by groups={g}")
    if c // g != c_per_group:
        raise ShapeError(
            f"C_in: input has {c} channels, weights expect {c_per_group * g} "
            f"({c_per_group} per group x {g} groups)"
        )
    ho, wo = p.output_hw(h, wd)
    if ho < 1 or wo < 1:
        raise ShapeError(f"H/W: input {h}x{wd} too small for kernel {p.kernel} with padding {p.padding}")
    return n, c, h, wd, c_out, c_per_group, kh, kw, g, ho, wo


def _tap(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[..., i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: Optional[np.ndarray] = None,
    p: ConvParams = ConvParams(),
) -> np.ndarray:
    """Grouped 2-D convolution (cross-correlation) with symmetric zero padding.

    Computed tap by tap: each of the Kh*Kw kernel offsets contributes one
    batched matmul over the input channels of a group, so the summation order
    is fixed and results are reproducible.
    """
    n, c, h, wd, c_out, cg, kh, kw, g, ho, wo = _conv_geometry(x, w, p)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias: expected shape ({c_out},), got {bias.shape}")
    s, pad = p.stride, p.padding
    og = c_out // g
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    wg = w.reshape(g, og, cg, kh, kw)
    out = np.zeros((n, g, og, ho * wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            patch = _tap(xg, i, j, s, ho, wo).reshape(n, g, cg, ho * wo)
            if cg == 1:
                out += wg[None, :, :, 0, i, j, None] * patch
            else:
                out += wg[:, :, :, i, j] @ patch
    out = out.reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias.reshape(1, c_out, 1, 1)
    return out


def _conv2d_vjp(x, w, bias, g_out, p: ConvParams = ConvParams()):
    n, c, h, wd, c_out, cg, kh, kw, g, ho, wo = _conv_geometry(x, w, p)
    s, pad = p.stride, p.padding
    og = c_out // g
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    wg = w.reshape(g, og, cg, kh, kw)
    gg = g_out.reshape(n, g, og, ho * wo)
    dxp = np.zeros(xg.shape, dtype=np.result_type(x, w, g_out))
    dwg = np.zeros(wg.shape, dtype=dxp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _tap(xg, i, j, s, ho, wo).reshape(n, g, cg, ho * wo)
            if cg == 1 and og == 1:
                dpatch = wg[None, :, :, 0, i, j, None] * gg
                dwg[:, 0, 0, i, j] = np.sum(gg[:, :, 0] * patch[:, :, 0], axis=(0, 2))
            else:
                dpatch = np.swapaxes(wg[:, :, :, i, j], 1, 2) @ gg
                dwg[:, :, :, i, j] = np.sum(gg @ np.swapaxes(patch, 2, 3), axis=0)
            _tap(dxp, i, j, s, ho, wo)[...] += dpatch.reshape(n, g, cg, ho, wo)
    dx = dxp.reshape(n, c, xp.shape[2], xp.shape[3])
    if pad:
        dx = dx[:, :, pad : pad + h, pad : pad + wd]
    db = g_out.sum(axis=(0, 2, 3)) if bias is not None else None
    return np.ascontiguousarray(dx), dwg.reshape(w.shape), db


def transpose_conv2x2(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Stride-2, 2x2 transposed convolution; weights are (C_in, C_out, 2, 2).

    Every input pixel scatters into its own 2x2 output block.
    """
    _check_rank4(x)
    _check_rank4(w, "weights")
    n, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"C_in: input has {c} channels, weights expect {w.shape[0]}")
    if w.shape[2:] != (2, 2):
        raise ShapeError(f"kernel must be 2x2, got {w.shape[2:]}")
    c_out = w.shape[1]
    out = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Co, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * wd)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias: expected shape ({c_out},), got {bias.shape}")
        out = out + bias.reshape(1, c_out, 1, 1)
    return np.ascontiguousarray(out)


def _transpose_conv2x2_vjp(x, w, bias, g_out):
    n, c, h, wd = x.shape
    g6 = g_out.reshape(n, w.shape[1], h, 2, wd, 2)
    dx = np.tensordot(g6, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, g6, axes=([0, 2, 3], [0, 2, 4]))
    db = g_out.sum(axis=(0, 2, 3)) if bias is not None else None
    return np.ascontiguousarray(dx), dw, db


# ------------------------------------------------------------- normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _bn_check(x, gamma, beta, running_mean, running_var, eps):
    _check_rank4(x)
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"{name}: expected shape ({c},), got {v.shape}")
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")


def _bc(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def _batch_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - _bc(mean)) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm2d(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = BN_EPS,
    training: bool = False,
) -> np.ndarray:
    """Per-channel batch normalization.

    In training mode the (biased) batch statistics are used; running
    statistics are left untouched here, see :func:`update_running_stats`.
    """
    _bn_check(x, gamma, beta, running_mean, running_var, eps)
    if training:
        mean, var = _batch_stats(x)
    else:
        mean, var = running_mean, running_var
    denom = var + eps
    if np.any(denom <= 0):
        raise ValueError("variance + eps must be positive (use eps > 0 when a channel has zero variance)")
    inv = 1.0 / np.sqrt(denom)
    scale = (gamma * inv).astype(x.dtype, copy=False)
    shift = (beta - mean * gamma * inv).astype(x.dtype, copy=False)
    return x * _bc(scale) + _bc(shift)


def update_running_stats(x, running_mean, running_var, momentum: float = BN_MOMENTUM):
    """Exponential moving average of batch statistics; returns new (mean, var)."""
    mean, var = _batch_stats(x)
    new_mean = momentum * running_mean + (1.0 - momentum) * mean
    new_var = momentum * running_var + (1.0 - momentum) * var
    return new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)


def _batchnorm2d_vjp(x, gamma, beta, running_mean, running_var, g_out, eps=BN_EPS, training=False):
    _bn_check(x, gamma, beta, running_mean, running_var, eps)
    if training:
        mean, var = _batch_stats(x)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bc(mean)) * _bc(inv)
    dgamma = np.sum(g_out * xhat, axis=(0, 2, 3))
    dbeta = g_out.sum(axis=(0, 2, 3))
    dxhat = g_out * _bc(gamma)
    if training:
        m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = _bc(inv) * (dxhat - m1 - xhat * m2)
    else:
        dx = dxhat * _bc(inv)
    return dx.astype(x.dtype, copy=False), dgamma, dbeta, None, None


# ---------------------------------------------------------------- activations


def _hard_sigmoid(x):
    return np.clip(x + 3.0, 0.0, 6.0) / 6.0


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def activation(x: np.ndarray, kind: ActivationKind | str) -> np.ndarray:
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0)
    if kind is ActivationKind.RELU6:
        return np.clip(x, 0, 6)
    if kind is ActivationKind.SIGMOID:
        return _sigmoid(x)
    if kind is ActivationKind.HARD_SIGMOID:
        return _hard_sigmoid(x).astype(x.dtype, copy=False)
    if kind is ActivationKind.HARD_SWISH:
        return (x * _hard_sigmoid(x)).astype(x.dtype, copy=False)
    return x.copy()


def _activation_vjp(x, g_out, kind: ActivationKind | str):
    # subgradient 0 at every kink
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        d = x > 0
    elif kind is ActivationKind.RELU6:
        d = (x > 0) & (x < 6)
    elif kind is ActivationKind.SIGMOID:
        s = _sigmoid(x)
        d = s * (1 - s)
    elif kind is ActivationKind.HARD_SIGMOID:
        d = ((x > -3) & (x < 3)) / 6.0
    elif kind is ActivationKind.HARD_SWISH:
        d = np.where(x >= 3, 1.0, np.where(x > -3, (2.0 * x + 3.0) / 6.0, 0.0))
    else:
        return (g_out.copy(),)
    return ((g_out * d).astype(g_out.dtype, copy=False),)


# -------------------------------------------------------------------- pooling


def _windows2x2(x):
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"H/W: maxpool2x2 needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2x2(x: np.ndarray, return_indices: bool = False):
    """2x2 / stride-2 max pooling.

    Window positions are numbered row-major (0..3); ties resolve to the first.
    """
    win = _windows2x2(x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if return_indices:
        return out, idx
    return out


def _maxpool2x2_vjp(x, g_out):
    n, c, h, w = x.shape
    _, idx = maxpool2x2(x, return_indices=True)
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g_out.dtype)
    np.put_along_axis(dwin, idx[..., None], g_out[..., None], axis=-1)
    dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (dx,)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check_rank4(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"H/W: global_avg_pool needs non-empty spatial dims, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def _global_avg_pool_vjp(x, g_out):
    h, w = x.shape[2:]
    return (np.broadcast_to(g_out / (h * w), x.shape).copy(),)


# --------------------------------------------------------------- combinators


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_rank4(a, "a")
    _check_rank4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N/H/W of {a.shape} and {b.shape} differ")
    return np.concatenate([a, b], axis=1)


def _concat_channels_vjp(a, b, g_out):
    ca = a.shape[1]
    return g_out[:, :ca].copy(), g_out[:, ca:].copy()


def softmax_channels(x: np.ndarray) -> np.ndarray:
    _check_rank4(x)
    if x.shape[1] < 1:
        raise ShapeError("softmax_channels needs at least one channel")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softmax_channels_vjp(x, g_out):
    s = softmax_channels(x)
    return (s * (g_out - np.sum(g_out * s, axis=1, keepdims=True)),)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "elementwise_add")
    return a + b


def _elementwise_add_vjp(a, b, g_out):
    return g_out.copy(), g_out.copy()


def channel_scale(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Multiply each (n, c) feature map by ``scale[n, c, 0, 0]``."""
    _check_rank4(x)
    if scale.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"channel_scale: scale shape {scale.shape} does not fit input {x.shape}")
    return x * scale


def _channel_scale_vjp(x, scale, g_out):
    return g_out * scale, np.sum(g_out * x, axis=(2, 3), keepdims=True)


# ------------------------------------------------------------------------ vjp

_VJPS: dict[Callable, Callable] = {
    conv2d: _conv2d_vjp,
    transpose_conv2x2: _transpose_conv2x2_vjp,
    batchnorm2d: _batchnorm2d_vjp,
    activation: _activation_vjp,
    maxpool2x2: _maxpool2x2_vjp,
    global_avg_pool: _global_avg_pool_vjp,
    concat_channels: _concat_channels_vjp,
    softmax_channels: _softmax_channels_vjp,
    elementwise_add: _elementwise_add_vjp,
    channel_scale: _channel_scale_vjp,
}


def vjp(op: Callable, inputs: Sequence, cotangent: np.ndarray, **attrs) -> tuple:
    """Vector-Jacobian product of ``op`` at ``inputs``.

    ``inputs`` are the positional tensor arguments of the op (optional ones
    may be ``None``); keyword attributes (``p``, ``kind``, ``eps``,
    ``training``) are forwarded.  Returns one cotangent per input, ``None``
    for inputs that are absent or not differentiable (running statistics).
    """
    try:
        rule = _VJPS[op]
    except (KeyError, TypeError):
        raise ValueError(f"no vjp registered for {getattr(op, '__name__', op)!r}") from None
    out_shape = op(*inputs, **attrs).shape
    if cotangent.shape != out_shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} does not match output shape {out_shape}")
    return tuple(rule(*inputs, cotangent, **attrs))
