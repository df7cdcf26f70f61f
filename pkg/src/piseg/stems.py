"""Convolution stem (image -> C0 features at 1/P) and de-convolution stems (features -> class logits).

The conv stem stacks log2(P) blocks, each ``conv3x3/s2 -> GELU -> LN ->
conv3x3/s1 -> GELU -> LN``, doubling channels whenever resolution halves so
the last block emits C0.  A de-conv stem stacks log2(P) - 2 up-sampling
blocks (``deconv2x2/s2 -> GELU -> LN``, halving channels) and ends with a
single 4x4/stride-4 deconvolution to class logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .init import trunc_normal
from .tensor import Tensor

FINAL_DECONV = 4


@dataclass(frozen=True)
class StemConfig:
    patch_size: int
    in_channels: int
    embed_dim: int
    num_classes: int

    def __post_init__(self):
        if self.patch_size not in (4, 8):
            raise ConfigError(f"patch size must be 4 or 8, got {self.patch_size}")
        if self.embed_dim % (2 ** (self.conv_blocks - 1)):
            raise ConfigError(f"embed_dim {self.embed_dim} cannot be halved {self.conv_blocks - 1} times")

    @property
    def conv_blocks(self) -> int:
        return int(math.log2(self.patch_size))

    @property
    def deconv_blocks(self) -> int:
        return self.conv_blocks - 2

    def channel_ladder(self) -> list[int]:
        """Output channels of each conv-stem block, ending at embed_dim."""
        nb = self.conv_blocks
        return [self.embed_dim // 2 ** (nb - k) for k in range(1, nb + 1)]


def _ln_cf(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return F.to_channels_first(F.layernorm(F.to_channels_last(x), params[f"{name}.weight"], params[f"{name}.bias"]))


def init_conv_stem(rng: np.random.Generator, cfg: StemConfig, dtype=np.float64, std: float = 0.02) -> dict[str, np.ndarray]:
    p = {}
    cin = cfg.in_channels
    for k, c in enumerate(cfg.channel_ladder(), start=1):
        pre = f"block{k}."
        p[pre + "conv1.weight"] = trunc_normal(rng, (c, cin, 3, 3), std, dtype)
        p[pre + "conv1.bias"] = np.zeros(c, dtype)
        p[pre + "conv2.weight"] = trunc_normal(rng, (c, c, 3, 3), std, dtype)
        p[pre + "conv2.bias"] = np.zeros(c, dtype)
        for ln in ("ln1", "ln2"):
            p[f"{pre}{ln}.weight"] = np.ones(c, dtype)
            p[f"{pre}{ln}.bias"] = np.zeros(c, dtype)
        cin = c
    return p


def conv_stem_forward(img: Tensor, params: Mapping[str, Tensor], cfg: StemConfig) -> Tensor:
    if img.ndim != 4 or img.shape[1] != cfg.in_channels:
        raise DimensionError(f"conv stem expects (N, {cfg.in_channels}, H, W), got {img.shape}")
    h, w = img.shape[2:]
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {cfg.patch_size}")
    x = img
    for k in range(1, cfg.conv_blocks + 1):
        pre = f"block{k}."
        x = F.conv2d(x, params[pre + "conv1.weight"], params[pre + "conv1.bias"], stride=2, padding=1)
        x = _ln_cf(F.gelu(x), params, pre + "ln1")
        x = F.conv2d(x, params[pre + "conv2.weight"], params[pre + "conv2.bias"], stride=1, padding=1)
        x = _ln_cf(F.gelu(x), params, pre + "ln2")
    return x


def init_deconv_stem(rng: np.random.Generator, in_channels: int, num_classes: int, extra_blocks: int,
                     dtype=np.float64, std: float = 0.02) -> dict[str, np.ndarray]:
    p = {}
    c = in_channels
    for k in range(1, extra_blocks + 1):
        if c % 2:
            raise ConfigError(f"cannot halve {c} channels in de-conv block {k}")
        pre = f"block{k}."
        p[pre + "deconv.weight"] = trunc_normal(rng, (c, c // 2, 2, 2), std, dtype)
        p[pre + "deconv.bias"] = np.zeros(c // 2, dtype)
        p[pre + "ln.weight"] = np.ones(c // 2, dtype)
        p[pre + "ln.bias"] = np.zeros(c // 2, dtype)
        c //= 2
    p["out.weight"] = trunc_normal(rng, (c, num_classes, FINAL_DECONV, FINAL_DECONV), std, dtype)
    p["out.bias"] = np.zeros(num_classes, dtype)
    return p


def deconv_stem_forward(feat: Tensor, params: Mapping[str, Tensor], extra_blocks: int) -> Tensor:
    x = feat
    for k in range(1, extra_blocks + 1):
        pre = f"block{k}."
        w = params[pre + "deconv.weight"]
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"de-conv block {k} expects {w.shape[0]} channels, got {x.shape[1]}")
        x = F.deconv2d(x, w, params[pre + "deconv.bias"], stride=2)
        x = _ln_cf(F.gelu(x), params, pre + "ln")
    w = params["out.weight"]
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"final de-conv expects {w.shape[0]} channels, got {x.shape[1]}")
    return F.deconv2d(x, w, params["out.bias"], stride=FINAL_DECONV)


def aux_head_forward(feat: Tensor, params: Mapping[str, Tensor], extra_blocks: int) -> Tensor:
    """Independent de-conv stem on a decoder-stage output, upsampling by 2**(extra_blocks) * 4."""
    return deconv_stem_forward(feat, params, extra_blocks)
