"""Differentiable neural-network primitives built on :mod:`piseg.tensor`.

Convolutions are cross-correlations (no kernel flip) over NCHW tensors.
``linear`` and ``layernorm`` act on the last axis, so callers holding NCHW
feature maps transpose to channels-last first.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    cout, cin = weight.shape
    if x.shape[-1] != cin or (bias is not None and bias.shape != (cout,)):
        raise DimensionError(
            f"linear: input {x.shape} vs weight {weight.shape}"
            + (f" / bias {bias.shape}" if bias is not None else "")
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("linear", out.reshape(lead + (cout,)), inputs, bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if padding < 0 or stride < 1:
        raise ConfigError(f"conv2d: padding {padding} / stride {stride} invalid")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if kh != kw:
        raise DimensionError(f"conv2d: non-square kernel {kernel.shape}")
    k = kh
    if k % 2 == 0 and stride != k:
        raise ConfigError(f"conv2d: even kernel {k} needs stride == kernel, got stride {stride}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {cout} output channels")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: output extent {ho}x{wo} for input {h}x{w}, kernel {k}, pad {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (n, cin, ho, wo, k, k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (n, ho, wo, cin, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result("conv2d", out, inputs, bw)


def dwconv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Depth-wise convolution: output channel c sees only input channel c."""
    if kernel.ndim != 3 or x.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"dwconv2d: input {x.shape} vs kernel {kernel.shape}")
    c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"dwconv2d: kernel must be square and odd, got {k}x{k2}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ConfigError(f"dwconv2d: padding must be {(k - 1) // 2} for kernel {k}, got {padding}")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"dwconv2d: bias {bias.shape} for {c} channels")
    n, _, h, w = x.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)
    out = np.einsum("nchwij,cij->nchw", cols, kernel.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gk = np.einsum("nchwij,nchw->cij", cols, g, optimize=True)
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
        gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
        gx = np.einsum("nchwij,cij->nchw", gcols, kernel.data[:, ::-1, ::-1], optimize=True)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result("dwconv2d", np.ascontiguousarray(out), inputs, bw)


def deconv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int | None = None) -> Tensor:
    """Non-overlapping transposed convolution (kernel == stride)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"deconv2d: input {x.shape} vs kernel {kernel.shape}")
    cin, cout, k, k2 = kernel.shape
    if stride is None:
        stride = k
    if k != k2 or k != stride:
        raise ConfigError(f"deconv2d: kernel {k}x{k2} must equal stride {stride}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"deconv2d: bias {bias.shape} for {cout} output channels")
    n, _, h, w = x.shape
    # out[n, o, h*k+i, w*k+j] = sum_c x[n,c,h,w] kernel[c,o,i,j]
    out = np.tensordot(x.data, kernel.data, axes=([1], [0]))  # (n, h, w, cout, k, k)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, h * k, w * k)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        g6 = g.reshape(n, cout, h, k, w, k)
        gx = np.tensordot(g6, kernel.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gk = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4]))  # (cin, cout, k, k)
        gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result("deconv2d", np.ascontiguousarray(out), inputs, bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result("layernorm", out, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gauss error function."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return make_result("gelu", out.astype(x.dtype, copy=False), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def to_channels_last(x: Tensor) -> Tensor:
    return x.transpose((0, 2, 3, 1))


def to_channels_first(x: Tensor) -> Tensor:
    return x.transpose((0, 3, 1, 2))


def nearest_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Label-preserving downsampling of the last two axes."""
    if factor == 1:
        return mask
    return np.ascontiguousarray(mask[..., ::factor, ::factor])
