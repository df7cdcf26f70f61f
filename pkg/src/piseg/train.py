"""Adam, the training loop and the branch ablation runner."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as M
from .data import AugmentConfig, augment, load_split, random_crop, read_manifest, sample_rng
from .errors import ConfigError, ContractError, NonFiniteError
from .inference import plan_windows, predict_full
from .losses import LossConfig, combined_loss
from .metrics import mean_foreground_dsc
from .model import AdamState, ModelConfig, ParameterStore, SegmentationModel
from .tensor import backward

log = logging.getLogger(__name__)


class TrainingDiverged(NonFiniteError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    max_iters: int = 1000
    seed: int = 0
    deep_supervision: bool = True
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()
    val_interval: int = 100
    step_fraction: float = 0.5
    init_checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.val_interval < 1:
            raise ConfigError(f"val_interval must be >= 1, got {self.val_interval}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], Mapping):
            d["loss"] = LossConfig(**d["loss"])
        if "augment" in d and isinstance(d["augment"], Mapping):
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    final_checkpoint: str | None = None
    best_checkpoint: str | None = None
    best_val_dsc: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def adam_step(store: ParameterStore, cfg: TrainConfig, order: Sequence[str] | None = None) -> None:
    """Bias-corrected Adam on every parameter, then clear gradients."""
    b1, b2 = cfg.betas
    names = list(order) if order is not None else store.names()
    for name in names:
        if store[name].grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    for name in names:
        p = store[name]
        g = p.grad
        st = store.adam.get(name)
        if st is None:
            st = store.adam[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m = b1 * st.m + (1 - b1) * g
        st.v = b2 * st.v + (1 - b2) * g * g
        m_hat = st.m / (1 - b1 ** st.step)
        v_hat = st.v / (1 - b2 ** st.step)
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype, copy=False)
        p.grad = None


def _batch(samples, it: int, cfg: TrainConfig, crop: int):
    rng = sample_rng(cfg.seed, 0, it)
    idx = rng.choice(len(samples), size=cfg.batch_size, replace=len(samples) < cfg.batch_size)
    imgs, masks = [], []
    for k, i in enumerate(idx):
        srng = sample_rng(cfg.seed, 1, it, k)
        s = random_crop(samples[int(i)], crop, srng)
        s = augment(s, srng, cfg.augment)
        imgs.append(s.image)
        masks.append(s.mask)
    return np.stack(imgs), np.stack(masks)


def predict_samples(store: ParameterStore, config: ModelConfig, samples, step_fraction: float = 0.5):
    net = SegmentationModel(store, config)
    preds = []
    for s in samples:
        plan = plan_windows(s.mask.shape, config.input_size, step_fraction)
        preds.append(predict_full(s.image, net, plan)[1])
    return preds


def evaluate_dsc(store: ParameterStore, config: ModelConfig, samples, step_fraction: float = 0.5) -> float:
    """Mean foreground DSC (fraction) of sliding-window predictions."""
    preds = predict_samples(store, config, samples, step_fraction)
    return mean_foreground_dsc(preds, [s.mask for s in samples], config.num_classes)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset_dir, out_dir=None,
          train_samples=None, val_samples=None, store: ParameterStore | None = None,
          log_fh=None) -> tuple[TrainLog, ParameterStore]:
    """Run the loop; writes ``train_log.jsonl`` and checkpoints under ``out_dir`` when given."""
    t0 = time.perf_counter()
    manifest = read_manifest(dataset_dir) if dataset_dir is not None else None
    if manifest is not None and manifest["num_classes"] != model_cfg.num_classes:
        raise ConfigError(f"dataset has {manifest['num_classes']} classes, model expects {model_cfg.num_classes}")
    if model_cfg.deep_supervision != train_cfg.deep_supervision:
        model_cfg = model_cfg.replace(deep_supervision=train_cfg.deep_supervision)
    if train_samples is None:
        train_samples = load_split(dataset_dir, "train")
    if val_samples is None:
        val_samples = load_split(dataset_dir, "val") if dataset_dir is not None else []
    if not train_samples:
        raise ConfigError("no training samples")

    if store is None:
        if train_cfg.init_checkpoint:
            store, _ = M.load(train_cfg.init_checkpoint, model_cfg, dtype=model_cfg.dtype)
        else:
            store = M.build(model_cfg, train_cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    own_fh = False
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if log_fh is None:
            log_fh = open(out / "train_log.jsonl", "w")
            own_fh = True

    tlog = TrainLog()
    crop = model_cfg.input_size
    try:
        for it in range(train_cfg.max_iters):
            images, masks = _batch(train_samples, it, train_cfg, crop)
            try:
                outputs = M.forward(images.astype(store.dtype), store, model_cfg)
                loss = combined_loss(outputs, masks, train_cfg.loss, model_cfg.deep_supervision)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at iteration {it} (lr {train_cfg.lr}): {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at iteration {it} (lr {train_cfg.lr})")
            backward(loss)
            adam_step(store, train_cfg)
            tlog.losses.append(value)
            record = {"iter": it, "loss": value}
            last = it == train_cfg.max_iters - 1
            if val_samples and ((it + 1) % train_cfg.val_interval == 0 or last):
                dsc = evaluate_dsc(store, model_cfg, val_samples, train_cfg.step_fraction)
                tlog.val.append((it, dsc))
                record["val_dsc"] = dsc
                if tlog.best_val_dsc is None or dsc > tlog.best_val_dsc:
                    tlog.best_val_dsc = dsc
                    if out is not None:
                        M.save(store, out / "best.ckpt", model_cfg)
                        tlog.best_checkpoint = str(out / "best.ckpt")
                log.info("iter %d loss %.5f val dsc %.4f", it, value, dsc)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
        if out is not None:
            M.save(store, out / "final.ckpt", model_cfg)
            tlog.final_checkpoint = str(out / "final.ckpt")
    finally:
        if own_fh:
            log_fh.close()
    tlog.wall_time = time.perf_counter() - t0
    return tlog, store


# ----------------------------------------------------------------------------
# ablation

ABLATION_VARIANTS = ("full", "sa_only", "dw_only")


def ablate(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset_dir, variants: Iterable[str] = ABLATION_VARIANTS,
           seeds: Sequence[int] = (0, 1, 2)) -> dict:
    """Train every variant on identical data and seeds; report val DSC per run and per variant."""
    variants = list(variants)
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise ConfigError(f"unknown ablation variants {bad}; choose from {ABLATION_VARIANTS}")
    train_samples = load_split(dataset_dir, "train")
    val_samples = load_split(dataset_dir, "val")
    if not val_samples:
        raise ConfigError("ablation needs a validation split")
    entries = []
    for variant in variants:
        cfg = model_cfg.replace(variant=variant)
        for seed in seeds:
            tlog, store = train(cfg, train_cfg.replace(seed=seed), dataset_dir,
                                train_samples=train_samples, val_samples=[])
            dsc = evaluate_dsc(store, cfg, val_samples, train_cfg.step_fraction)
            entries.append({"variant": variant, "seed": int(seed), "val_dsc": dsc,
                            "final_loss": tlog.losses[-1], "num_parameters": store.num_parameters()})
            log.info("ablation %s seed %d: val dsc %.4f", variant, seed, dsc)
    summary = {}
    for variant in variants:
        vals = np.array([e["val_dsc"] for e in entries if e["variant"] == variant])
        summary[variant] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                            "n": int(len(vals))}
    direction = {}
    if "full" in summary:
        for other in ("dw_only", "sa_only"):
            if other in summary:
                direction[f"full_ge_{other}"] = summary["full"]["mean"] >= summary[other]["mean"]
    return {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "seeds": [int(s) for s in seeds],
        "entries": entries,
        "summary": summary,
        "direction": direction,
        "flagged": [k for k, ok in direction.items() if not ok],
    }


def write_ablation_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "val_dsc", "final_loss", "num_parameters"])
        for e in report["entries"]:
            w.writerow([e["variant"], e["seed"], f"{e['val_dsc']:.6f}", f"{e['final_loss']:.6f}", e["num_parameters"]])
