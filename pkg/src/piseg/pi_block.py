"""Parallel non-isomorphic (PI) block.

    f_hat   = MLP(DwConv1(x)) + x
    f_tilde = SA(n) + DwConv2(n),      n = LN(f_hat) or f_hat
    out     = FC(f_tilde) + f_hat

The MLP is LN -> FC(C, 4C) -> GELU -> FC(4C, C).  ``variant`` drops one of
the two parallel branches for ablations: ``sa_only`` has no DwConv2,
``dw_only`` has no self-attention.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import functional as F
from .attention import AttentionConfig, init_attention_params, window_attention_map
from .errors import ConfigError, DimensionError
from .init import trunc_normal
from .tensor import Tensor

VARIANTS = ("full", "sa_only", "dw_only")
DW_KERNEL = 7
MLP_RATIO = 4


@dataclass(frozen=True)
class PIBlockConfig:
    channels: int
    window_size: int = 7
    num_heads: int = 1
    kernel_size: int = DW_KERNEL
    mlp_ratio: int = MLP_RATIO
    parallel_prenorm: bool = True
    relative_bias: bool = True
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown PI block variant {self.variant!r}; choose from {VARIANTS}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"depth-wise kernel must be odd, got {self.kernel_size}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.channels, self.window_size, self.num_heads, self.relative_bias)

    @property
    def has_sa(self) -> bool:
        return self.variant != "dw_only"

    @property
    def has_dw(self) -> bool:
        return self.variant != "sa_only"


class BranchOutputs(NamedTuple):
    sa_out: Tensor | None
    dw_out: Tensor | None


def init_pi_params(rng: np.random.Generator, cfg: PIBlockConfig, dtype=np.float64, std: float = 0.02) -> dict[str, np.ndarray]:
    c, k, hidden = cfg.channels, cfg.kernel_size, cfg.channels * cfg.mlp_ratio
    p = {
        "dw1.weight": trunc_normal(rng, (c, k, k), std, dtype),
        "dw1.bias": np.zeros(c, dtype),
        "mlp.ln.weight": np.ones(c, dtype),
        "mlp.ln.bias": np.zeros(c, dtype),
        "mlp.fc1.weight": trunc_normal(rng, (hidden, c), std, dtype),
        "mlp.fc1.bias": np.zeros(hidden, dtype),
        "mlp.fc2.weight": trunc_normal(rng, (c, hidden), std, dtype),
        "mlp.fc2.bias": np.zeros(c, dtype),
        "fc_out.weight": trunc_normal(rng, (c, c), std, dtype),
        "fc_out.bias": np.zeros(c, dtype),
    }
    if cfg.parallel_prenorm:
        p["norm.weight"] = np.ones(c, dtype)
        p["norm.bias"] = np.zeros(c, dtype)
    if cfg.has_sa:
        p.update({f"attn.{k_}": v for k_, v in init_attention_params(rng, cfg.attention, dtype, std).items()})
    if cfg.has_dw:
        p["dw2.weight"] = trunc_normal(rng, (c, k, k), std, dtype)
        p["dw2.bias"] = np.zeros(c, dtype)
    return p


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _residual_input(x: Tensor, params: Mapping[str, Tensor], cfg: PIBlockConfig) -> Tensor:
    """f_hat in channels-last layout."""
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise DimensionError(f"PI block expects (N, {cfg.channels}, H, W), got {x.shape}")
    h = F.to_channels_last(F.dwconv2d(x, params["dw1.weight"], params["dw1.bias"]))
    h = F.layernorm(h, params["mlp.ln.weight"], params["mlp.ln.bias"])
    h = F.gelu(F.linear(h, params["mlp.fc1.weight"], params["mlp.fc1.bias"]))
    h = F.linear(h, params["mlp.fc2.weight"], params["mlp.fc2.bias"])
    return h + F.to_channels_last(x)


def _branches(f_hat: Tensor, params: Mapping[str, Tensor], cfg: PIBlockConfig) -> BranchOutputs:
    """Both parallel branches on f_hat, channels-last in and out."""
    n = F.layernorm(f_hat, params["norm.weight"], params["norm.bias"]) if cfg.parallel_prenorm else f_hat
    n_cf = F.to_channels_first(n)
    sa = dw = None
    if cfg.has_sa:
        sa = F.to_channels_last(window_attention_map(n_cf, _sub(params, "attn."), cfg.attention))
    if cfg.has_dw:
        dw = F.to_channels_last(F.dwconv2d(n_cf, params["dw2.weight"], params["dw2.bias"]))
    return BranchOutputs(sa, dw)


def _merge(branches: BranchOutputs) -> Tensor:
    sa, dw = branches
    if sa is None:
        return dw
    if dw is None:
        return sa
    return sa + dw


def pi_forward(x: Tensor, params: Mapping[str, Tensor], cfg: PIBlockConfig) -> Tensor:
    f_hat = _residual_input(x, params, cfg)
    f_tilde = _merge(_branches(f_hat, params, cfg))
    out = F.linear(f_tilde, params["fc_out.weight"], params["fc_out.bias"]) + f_hat
    return F.to_channels_first(out)


def pi_branch_outputs(x: Tensor, params: Mapping[str, Tensor], cfg: PIBlockConfig) -> BranchOutputs:
    """The attention and convolution branch outputs (NCHW) before they are summed."""
    sa, dw = _branches(_residual_input(x, params, cfg), params, cfg)
    return BranchOutputs(
        F.to_channels_first(sa) if sa is not None else None,
        F.to_channels_first(dw) if dw is not None else None,
    )


def pi_residual_input(x: Tensor, params: Mapping[str, Tensor], cfg: PIBlockConfig) -> Tensor:
    """f_hat as NCHW, the input shared by both parallel branches."""
    return F.to_channels_first(_residual_input(x, params, cfg))


def pi_merge(branches: BranchOutputs, f_hat: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Recombine NCHW branch outputs with f_hat exactly as :func:`pi_forward` does."""
    sa, dw = branches
    f_tilde = _merge(BranchOutputs(
        F.to_channels_last(sa) if sa is not None else None,
        F.to_channels_last(dw) if dw is not None else None,
    ))
    out = F.linear(f_tilde, params["fc_out.weight"], params["fc_out.bias"]) + F.to_channels_last(f_hat)
    return F.to_channels_first(out)
