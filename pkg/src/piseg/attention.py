"""Non-overlapping window partitioning and multi-head window self-attention.

Attention weights vary over position pairs but are shared by every channel
inside a head; contrast with :func:`piseg.functional.dwconv2d`, whose
weights vary over channels and are shared across positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    window_size: int = 7
    num_heads: int = 1
    use_relative_bias: bool = True

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.num_heads < 1 or self.channels % self.num_heads:
            raise ConfigError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    @property
    def tokens(self) -> int:
        return self.window_size * self.window_size


def heads_for(channels: int, divisor: int = 32) -> int:
    """Head count ``channels // divisor``, at least one."""
    return max(1, channels // divisor)


@dataclass
class WindowBatch:
    """Windows as a (num_windows * batch, w*w, C) tensor plus the data needed to undo tiling."""

    tensor: Tensor
    batch: int
    height: int
    width: int
    window_size: int

    @property
    def padded_hw(self) -> tuple[int, int]:
        w = self.window_size
        return -(-self.height // w) * w, -(-self.width // w) * w

    @property
    def pad(self) -> tuple[int, int]:
        hp, wp = self.padded_hw
        return hp - self.height, wp - self.width

    @property
    def num_windows(self) -> int:
        hp, wp = self.padded_hw
        return (hp // self.window_size) * (wp // self.window_size)


def window_partition(x: Tensor, w: int) -> WindowBatch:
    """Tile an NCHW map into w x w windows (zero-padded bottom/right), row-major window order."""
    if w < 1:
        raise ConfigError(f"window size must be >= 1, got {w}")
    n, c, h, wd = x.shape
    xp = T.pad2d(x, (-h) % w, (-wd) % w)
    hp, wp = xp.shape[2:]
    t = xp.reshape(n, c, hp // w, w, wp // w, w).transpose((0, 2, 4, 3, 5, 1))
    t = t.reshape(n * (hp // w) * (wp // w), w * w, c)
    return WindowBatch(t, n, h, wd, w)


def window_reverse(wb: WindowBatch, tensor: Tensor | None = None) -> Tensor:
    """Inverse of :func:`window_partition`, cropping the padding; returns NCHW."""
    t = wb.tensor if tensor is None else tensor
    w = wb.window_size
    hp, wp = wb.padded_hw
    c = t.shape[-1]
    x = t.reshape(wb.batch, hp // w, wp // w, w, w, c).transpose((0, 5, 1, 3, 2, 4))
    x = x.reshape(wb.batch, c, hp, wp)
    if (hp, wp) != (wb.height, wb.width):
        x = x[:, :, :wb.height, :wb.width]
    return x


def relative_position_index(w: int) -> np.ndarray:
    """(w*w, w*w) index into a ((2w-1)^2,) bias table, keyed by the (dy, dx) offset."""
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # (2, w*w)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def _check_params(params: Mapping[str, Tensor], cfg: AttentionConfig) -> None:
    c = cfg.channels
    expect = {"qkv.weight": (3 * c, c), "qkv.bias": (3 * c,), "proj.weight": (c, c), "proj.bias": (c,)}
    if cfg.use_relative_bias:
        expect["bias_table"] = ((2 * cfg.window_size - 1) ** 2, cfg.num_heads)
    for key, shape in expect.items():
        if key not in params:
            raise DimensionError(f"attention parameter {key!r} missing")
        if params[key].shape != shape:
            raise DimensionError(f"attention parameter {key!r} has shape {params[key].shape}, expected {shape}")


def _attention_core(x: Tensor, params: Mapping[str, Tensor], cfg: AttentionConfig):
    """Return (per-head weights (B, heads, n, n), pre-projection output (B, n, C))."""
    _check_params(params, cfg)
    b, n, c = x.shape
    if c != cfg.channels:
        raise DimensionError(f"attention expects {cfg.channels} channels, got {c}")
    h, d = cfg.num_heads, cfg.head_dim
    qkv = F.linear(x, params["qkv.weight"], params["qkv.bias"])
    qkv = qkv.reshape(b, n, 3, h, d).transpose((2, 0, 3, 1, 4))  # (3, b, h, n, d)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    if cfg.use_relative_bias:
        if n != cfg.tokens:
            raise DimensionError(f"relative bias needs {cfg.tokens} tokens per window, got {n}")
        idx = relative_position_index(cfg.window_size)
        bias = T.take(params["bias_table"], idx.reshape(-1), axis=0)  # (n*n, h)
        bias = bias.reshape(n, n, h).transpose((2, 0, 1)).reshape(1, h, n, n)
        scores = scores + bias
    attn = F.softmax(scores, axis=-1)
    out = T.matmul(attn, v)  # (b, h, n, d)
    out = out.transpose((0, 2, 1, 3)).reshape(b, n, c)
    return attn, out


def window_self_attention(wb: WindowBatch, params: Mapping[str, Tensor], cfg: AttentionConfig) -> WindowBatch:
    _, out = _attention_core(wb.tensor, params, cfg)
    out = F.linear(out, params["proj.weight"], params["proj.bias"])
    return WindowBatch(out, wb.batch, wb.height, wb.width, wb.window_size)


def window_attention_map(x: Tensor, params: Mapping[str, Tensor], cfg: AttentionConfig) -> Tensor:
    """Partition an NCHW map, attend within windows, and tile back to NCHW."""
    wb = window_partition(x, cfg.window_size)
    return window_reverse(wb, window_self_attention(wb, params, cfg).tensor)


def attention_weight_probe(x: Tensor, params: Mapping[str, Tensor], cfg: AttentionConfig,
                           position: tuple[int, int], batch_index: int = 0) -> np.ndarray:
    """Post-softmax attention matrices (heads, w*w, w*w) of the window holding ``position``."""
    n, c, h, wd = x.shape
    y, xx = position
    if not (0 <= y < h and 0 <= xx < wd and 0 <= batch_index < n):
        raise IndexError(f"position {position} / batch {batch_index} outside map {x.shape}")
    w = cfg.window_size
    wb = window_partition(x, w)
    with T.no_grad():
        attn, _ = _attention_core(wb.tensor, params, cfg)
    per_item = wb.num_windows
    wp = wb.padded_hw[1] // w
    win = batch_index * per_item + (y // w) * wp + (xx // w)
    return attn.data[win].copy()


def init_attention_params(rng: np.random.Generator, cfg: AttentionConfig, dtype=np.float64, std: float = 0.02):
    from .init import trunc_normal

    c = cfg.channels
    params = {
        "qkv.weight": trunc_normal(rng, (3 * c, c), std, dtype),
        "qkv.bias": np.zeros(3 * c, dtype),
        "proj.weight": trunc_normal(rng, (c, c), std, dtype),
        "proj.bias": np.zeros(c, dtype),
    }
    if cfg.use_relative_bias:
        params["bias_table"] = trunc_normal(rng, ((2 * cfg.window_size - 1) ** 2, cfg.num_heads), std, dtype)
    return params
