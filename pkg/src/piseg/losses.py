"""Dice + cross-entropy objective with deep-supervision weighting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

DICE_WEIGHT = 1.2
CE_WEIGHT = 0.8
DS_WEIGHTS = (1 / 2, 1 / 4, 1 / 8)


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = DICE_WEIGHT
    ce_weight: float = CE_WEIGHT
    ds_weights: tuple[float, float, float] = DS_WEIGHTS
    smooth: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "ds_weights", tuple(float(a) for a in self.ds_weights))
        if self.dice_weight <= 0 or self.ce_weight <= 0:
            raise ConfigError("dice and CE weights must be positive")
        a = self.ds_weights
        if len(a) != 3 or not (a[0] > a[1] > a[2] > 0):
            raise ConfigError(f"deep-supervision weights must be strictly decreasing and positive, got {a}")


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if logits.data.size == 0:
        raise ContractError("empty logits")
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ContractError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.min() < 0 or target.max() >= k:
        raise ContractError(f"target classes must lie in [0, {k}), got [{target.min()}, {target.max()}]")
    return target.astype(np.int64)


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(N, H, W) labels -> (N, K, H, W) indicator array."""
    return (np.arange(num_classes)[None, :, None, None] == target[:, None]).astype(dtype)


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1e-5, per_class: bool = False) -> Tensor:
    """Soft Dice over softmax probabilities, batch-pooled per class, averaged over all classes."""
    target = _check_target(logits, target)
    k = logits.shape[1]
    p = F.softmax(logits, axis=1)
    g = one_hot(target, k, logits.dtype)
    inter = (p * g).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3))
    per = 1.0 - (inter * 2.0 + smooth) / (denom + smooth)
    return per if per_class else per.mean()


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax at the target class."""
    target = _check_target(logits, target)
    lp = F.log_softmax(logits, axis=1)
    g = one_hot(target, logits.shape[1], logits.dtype)
    n, _, h, w = logits.shape
    return -(lp * g).sum() * (1.0 / (n * h * w))


def segmentation_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    return dice_loss(logits, target, cfg.smooth) * cfg.dice_weight + ce_loss(logits, target) * cfg.ce_weight


def aux_targets(target: np.ndarray) -> list[np.ndarray]:
    """Nearest-neighbour masks at H/2 and H/4 for the auxiliary outputs."""
    return [F.nearest_downsample(target, 2), F.nearest_downsample(target, 4)]


def deep_supervision_total(scale_losses, weights=DS_WEIGHTS):
    """Weighted sum of per-scale losses ordered full, half, quarter resolution."""
    if len(scale_losses) != len(weights):
        raise ContractError(f"{len(scale_losses)} scale losses for {len(weights)} weights")
    total = scale_losses[0] * weights[0]
    for loss, a in zip(scale_losses[1:], weights[1:]):
        total = total + loss * a
    return total


def combined_loss(outputs: dict, target: np.ndarray, cfg: LossConfig = LossConfig(),
                  deep_supervision: bool | None = None) -> Tensor:
    """Full objective on a model output dict ``{"main", "aux"?}``."""
    aux = outputs.get("aux")
    if deep_supervision is None:
        deep_supervision = aux is not None
    if aux is not None and not deep_supervision:
        raise ContractError("auxiliary outputs present but deep supervision is off")
    if deep_supervision and (aux is None or len(aux) != 2):
        raise ContractError("deep supervision needs two auxiliary outputs")
    main = segmentation_loss(outputs["main"], target, cfg)
    if not deep_supervision:
        return main
    t2, t4 = aux_targets(np.asarray(target))
    losses = [main, segmentation_loss(aux[0], t2, cfg), segmentation_loss(aux[1], t4, cfg)]
    return deep_supervision_total(losses, cfg.ds_weights)


def as_scalar(loss: Tensor) -> float:
    return float(T.as_tensor(loss).data)
