"""Full encoder-decoder assembly, parameter store, and checkpoint IO.

Data flow (P = patch size, C0 = embed dim, H = input size)::

    stem            -> (C0,  H/P)
    enc1 x3 PI      -> skip1
    down1 (2x2/s2)  -> (2C0, H/2P)
    enc2 x3 PI      -> skip2
    down2           -> (4C0, H/4P)
    enc3 x3 PI
    dec3 x3 PI      -> aux2 head (H/4)
    up2, fuse skip2 -> (2C0, H/2P)
    dec2 x3 PI      -> aux1 head (H/2)
    up1, fuse skip1 -> (C0,  H/P)
    dec1 x3 PI
    de-conv stem    -> (classes, H)

Fusion concatenates the skip along channels and projects back with a
linear map.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import functional as F
from . import tensor as T
from .attention import heads_for
from .errors import ConfigError, CorruptCheckpointError, DimensionError, FormatError
from .init import trunc_normal
from .pi_block import PIBlockConfig, init_pi_params, pi_forward
from .stems import (StemConfig, aux_head_forward, conv_stem_forward, deconv_stem_forward,
                    init_conv_stem, init_deconv_stem)
from .tensor import Tensor

NUM_STAGES = 3
CHECKPOINT_MAGIC = b"T22C"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    in_channels: int = 1
    num_classes: int = 9
    patch_size: int = 4
    embed_dim: int = 96
    window_size: int = 7
    depths: tuple[int, ...] = (3, 3, 3)
    heads_divisor: int = 32
    deep_supervision: bool = True
    parallel_prenorm: bool = True
    relative_bias: bool = True
    variant: str = "full"
    precision: str = "train32"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.patch_size not in (4, 8):
            problems.append(f"patch_size must be 4 or 8 (got {self.patch_size})")
        elif self.input_size % (self.patch_size * 4):
            problems.append(f"input_size {self.input_size} must be divisible by patch_size*4 = {self.patch_size * 4}")
        if len(self.depths) != NUM_STAGES or min(self.depths) < 1:
            problems.append(f"depths must list {NUM_STAGES} positive counts (got {list(self.depths)})")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1 (got {self.in_channels})")
        if self.window_size < 1:
            problems.append(f"window_size must be >= 1 (got {self.window_size})")
        if self.precision not in T.DTYPES:
            problems.append(f"precision must be one of {sorted(T.DTYPES)} (got {self.precision!r})")
        if self.variant not in ("full", "sa_only", "dw_only"):
            problems.append(f"variant must be full, sa_only or dw_only (got {self.variant!r})")
        if not problems:
            try:
                self.stem
            except ConfigError as exc:
                problems.append(str(exc))
            for i in range(1, NUM_STAGES + 1):
                c = self.stage_channels(i)
                if c % heads_for(c, self.heads_divisor):
                    problems.append(f"stage {i} channels {c} not divisible by head count")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    @property
    def dtype(self):
        return T.DTYPES[self.precision]

    @property
    def stem(self) -> StemConfig:
        return StemConfig(self.patch_size, self.in_channels, self.embed_dim, self.num_classes)

    def stage_channels(self, i: int) -> int:
        return self.embed_dim * 2 ** (i - 1)

    def stage_resolution(self, i: int) -> int:
        return self.input_size // (self.patch_size * 2 ** (i - 1))

    def shape_ledger(self) -> list[tuple[int, int]]:
        """(resolution, channels) of encoder stages 1..3; decoder stages mirror them."""
        return [(self.stage_resolution(i), self.stage_channels(i)) for i in range(1, NUM_STAGES + 1)]

    def block_config(self, i: int) -> PIBlockConfig:
        c = self.stage_channels(i)
        # windows never exceed the stage map (a larger window would only attend padding)
        w = min(self.window_size, self.stage_resolution(i))
        return PIBlockConfig(c, w, heads_for(c, self.heads_divisor), parallel_prenorm=self.parallel_prenorm,
                             relative_bias=self.relative_bias, variant=self.variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "synapse224": ModelConfig(224, 1, 9, 4, 96),
    "acdc224": ModelConfig(224, 1, 4, 4, 192),
    "synapse320": ModelConfig(320, 1, 9, 4, 96),
    "hires512": ModelConfig(512, 3, 2, 8, 96),
    "tiny": ModelConfig(32, 1, 3, 4, 16, window_size=4, precision="verify64"),
    "toy": ModelConfig(64, 1, 3, 4, 32, window_size=4),
}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParameterStore:
    """Named trainable tensors in lexicographic order, plus Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        self.params = dict(sorted(self.params.items()))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterStore":
        return cls({k: Tensor(v, requires_grad=True, dtype=v.dtype, name=k) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Sub-mapping of parameters under ``prefix.`` with the prefix stripped."""
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore.from_arrays({k: v.data.astype(dtype) for k, v in self.params.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def build(config: ModelConfig, rng_seed: int = 0) -> ParameterStore:
    """Create all parameters: trunc-normal(0.02) weights, zero biases, unit LN scales."""
    config.validate()
    dtype = config.dtype
    rng = np.random.default_rng(rng_seed)
    arrays: dict[str, np.ndarray] = {}

    def put(prefix: str, sub: Mapping[str, np.ndarray]):
        for k, v in sub.items():
            arrays[f"{prefix}.{k}"] = v

    put("stem", init_conv_stem(rng, config.stem, dtype))
    for i in range(1, NUM_STAGES + 1):
        bcfg = config.block_config(i)
        for j in range(1, config.depths[i - 1] + 1):
            put(f"enc.stage{i}.block{j}", init_pi_params(rng, bcfg, dtype))
        if i < NUM_STAGES:
            c = config.stage_channels(i)
            arrays[f"down{i}.weight"] = trunc_normal(rng, (2 * c, c, 2, 2), 0.02, dtype)
            arrays[f"down{i}.bias"] = np.zeros(2 * c, dtype)
    for i in range(NUM_STAGES, 0, -1):
        bcfg = config.block_config(i)
        for j in range(1, config.depths[i - 1] + 1):
            put(f"dec.stage{i}.block{j}", init_pi_params(rng, bcfg, dtype))
        if i > 1:
            c = config.stage_channels(i)
            arrays[f"up{i - 1}.weight"] = trunc_normal(rng, (c, c // 2, 2, 2), 0.02, dtype)
            arrays[f"up{i - 1}.bias"] = np.zeros(c // 2, dtype)
            arrays[f"fuse{i - 1}.weight"] = trunc_normal(rng, (c // 2, c), 0.02, dtype)
            arrays[f"fuse{i - 1}.bias"] = np.zeros(c // 2, dtype)
    extra = config.stem.deconv_blocks
    put("destem", init_deconv_stem(rng, config.embed_dim, config.num_classes, extra, dtype))
    if config.deep_supervision:
        put("aux1", init_deconv_stem(rng, config.stage_channels(2), config.num_classes, extra, dtype))
        put("aux2", init_deconv_stem(rng, config.stage_channels(3), config.num_classes, extra, dtype))
    return ParameterStore.from_arrays(arrays)


def _stage(x: Tensor, store: ParameterStore, config: ModelConfig, side: str, i: int) -> Tensor:
    bcfg = config.block_config(i)
    for j in range(1, config.depths[i - 1] + 1):
        x = pi_forward(x, store.scope(f"{side}.stage{i}.block{j}"), bcfg)
    return x


def _fuse(x: Tensor, skip: Tensor, store: ParameterStore, k: int) -> Tensor:
    cat = T.concat([F.to_channels_last(x), F.to_channels_last(skip)], axis=-1)
    return F.to_channels_first(F.linear(cat, store[f"fuse{k}.weight"], store[f"fuse{k}.bias"]))


def forward(x, store: ParameterStore, config: ModelConfig, skip_hook=None) -> dict:
    """Return ``{"main": logits (N, K, H, W), "aux": [H/2 logits, H/4 logits]}``.

    ``aux`` is present only with deep supervision.  ``skip_hook(k, skip)``
    may replace skip tensor k (1 or 2) before fusion; used for diagnostics.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=store.dtype))
    elif x.dtype != store.dtype:
        x = Tensor(x.data.astype(store.dtype), requires_grad=x.requires_grad)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise DimensionError(f"model expects (N, {config.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    unit = config.patch_size * 2 ** (NUM_STAGES - 1)
    if h % unit or w % unit:
        raise DimensionError(f"input {h}x{w} must be divisible by {unit} for patch size {config.patch_size}")

    feat = conv_stem_forward(x, store.scope("stem"), config.stem)
    skips = {}
    for i in range(1, NUM_STAGES + 1):
        feat = _stage(feat, store, config, "enc", i)
        if i < NUM_STAGES:
            skips[i] = feat
            feat = F.conv2d(feat, store[f"down{i}.weight"], store[f"down{i}.bias"], stride=2)

    extra = config.stem.deconv_blocks
    aux = {}
    for i in range(NUM_STAGES, 0, -1):
        feat = _stage(feat, store, config, "dec", i)
        if config.deep_supervision and i > 1:
            aux[i - 1] = aux_head_forward(feat, store.scope(f"aux{i - 1}"), extra)
        if i > 1:
            feat = F.deconv2d(feat, store[f"up{i - 1}.weight"], store[f"up{i - 1}.bias"], stride=2)
            skip = skips[i - 1]
            if skip_hook is not None:
                skip = skip_hook(i - 1, skip)
            feat = _fuse(feat, skip, store, i - 1)
    out = {"main": deconv_stem_forward(feat, store.scope("destem"), extra)}
    if config.deep_supervision:
        out["aux"] = [aux[1], aux[2]]
    return out


class SegmentationModel:
    """Callable wrapper: numpy batch (N, Cin, h, w) -> numpy logits, no tape."""

    def __init__(self, store: ParameterStore, config: ModelConfig):
        self.store = store
        self.config = config

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return forward(np.asarray(batch, dtype=self.store.dtype), self.store, self.config)["main"].data


# ----------------------------------------------------------------------------
# checkpoints

def save(store: ParameterStore, path, config: ModelConfig | None = None) -> None:
    """Write ``T22C | u32 count | (u16 len, name, tensor record)* | u32 len, config JSON``."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + T.encode_tensor(t.data))
    cfg_json = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8") if config is not None else b""
    parts.append(struct.pack("<I", len(cfg_json)) + cfg_json)
    Path(path).write_bytes(b"".join(parts))


def load(path, config: ModelConfig | None = None, dtype=None) -> tuple[ParameterStore, ModelConfig | None]:
    """Read a checkpoint; optionally check it against ``config`` and cast to ``dtype``.

    Casting float64 to float32 rounds to nearest, so each value moves by at
    most half an f32 ulp.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CorruptCheckpointError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise CorruptCheckpointError(f"{path}: truncated entry at byte {pos}")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + n:
            raise CorruptCheckpointError(f"{path}: truncated name at byte {pos}")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        if name in arrays:
            raise CorruptCheckpointError(f"{path}: duplicate entry {name!r}")
        try:
            arr, pos = T.decode_tensor(buf, pos)
        except FormatError as exc:
            raise CorruptCheckpointError(f"{path}: entry {name!r}: {exc}") from None
        arrays[name] = arr
    if len(buf) < pos + 4:
        raise CorruptCheckpointError(f"{path}: missing config trailer at byte {pos}")
    (clen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) != pos + clen:
        raise CorruptCheckpointError(f"{path}: config trailer length {clen} does not match file size")
    stored_cfg = ModelConfig.from_dict(json.loads(buf[pos:].decode("utf-8"))) if clen else None

    if config is not None:
        expected = build(config, 0)
        want, have = set(expected.names()), set(arrays)
        for name in sorted(want ^ have):
            where = "missing from checkpoint" if name in want else "not in model"
            raise CorruptCheckpointError(f"{path}: parameter set mismatch, first offender {name!r} ({where})")
        for name in sorted(want):
            if expected[name].shape != arrays[name].shape:
                raise CorruptCheckpointError(
                    f"{path}: parameter {name!r} has shape {arrays[name].shape}, model expects {expected[name].shape}")
    if dtype is not None:
        arrays = {k: v.astype(dtype) for k, v in arrays.items()}
    return ParameterStore.from_arrays(arrays), stored_cfg
