"""Sliding-window whole-image prediction with Gaussian importance weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError

STEP_PRESETS = {"default": 0.5, "synapse224": 0.3, "synapse320": 0.2}
WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class SlidingPlan:
    crop: int
    step_fraction: float
    height: int
    width: int
    origins: tuple[tuple[int, int], ...]
    sigma: float

    @property
    def stride(self) -> int:
        return _stride(self.crop, self.step_fraction)


def _stride(crop: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * crop + 0.5)))


def axis_origins(length: int, crop: int, stride: int) -> list[int]:
    """0, s, 2s, ... with the last window clamped to end at the edge."""
    last = length - crop
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def plan_windows(image_hw: tuple[int, int], crop: int, step_fraction: float = 0.5) -> SlidingPlan:
    """Row-major window origins; images smaller than ``crop`` are planned at their padded size."""
    if not step_fraction > 0 or step_fraction > 1:
        raise ConfigError(f"step fraction must lie in (0, 1], got {step_fraction}")
    if crop < 1:
        raise ConfigError(f"crop must be positive, got {crop}")
    h, w = (max(int(v), crop) for v in image_hw)
    s = _stride(crop, step_fraction)
    origins = tuple((y, x) for y in axis_origins(h, crop, s) for x in axis_origins(w, crop, s))
    return SlidingPlan(crop, float(step_fraction), h, w, origins, crop / 8)


def gaussian_map(crop: int, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian centred on the crop, peak 1, floored at 1e-8."""
    if sigma is None:
        sigma = crop / 8
    centre = (crop - 1) / 2
    d = np.arange(crop, dtype=np.float64) - centre
    g1 = np.exp(-0.5 * (d / sigma) ** 2)
    g = np.outer(g1, g1)
    g /= g.max()
    return np.maximum(g, WEIGHT_FLOOR)


def _softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def predict_full(image: np.ndarray, model: Callable[[np.ndarray], np.ndarray],
                 plan: SlidingPlan) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate per-window softmax maps weighted by the Gaussian; returns (prob (K,H,W), mask (H,W)).

    ``image`` is (Cin, H, W); ``model`` maps (1, Cin, crop, crop) to
    (1, K, crop, crop) logits.
    """
    image = np.asarray(image, dtype=np.float64)
    cin, h0, w0 = image.shape
    ph, pw = plan.height - h0, plan.width - w0
    if ph < 0 or pw < 0:
        raise ContractError(f"plan for {plan.height}x{plan.width} does not fit image {h0}x{w0}")
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h0, w0) > 1 else "edge")
    c = plan.crop
    weight = gaussian_map(c, plan.sigma)
    num = None
    den = np.zeros((plan.height, plan.width), dtype=np.float64)
    for y, x in plan.origins:
        logits = np.asarray(model(image[None, :, y:y + c, x:x + c]), dtype=np.float64)[0]
        prob = _softmax(logits, axis=0)
        if num is None:
            num = np.zeros((prob.shape[0], plan.height, plan.width), dtype=np.float64)
        num[:, y:y + c, x:x + c] += prob * weight
        den[y:y + c, x:x + c] += weight
    if den.min() <= 0:
        raise ContractError("sliding plan left pixels with zero accumulated weight")
    prob = (num / den)[:, :h0, :w0]
    return prob, prob.argmax(axis=0)
