"""Synthetic segmentation data, binary PGM IO, cropping and the augmentation chain.

Dataset layout::

    images/{id}.pgm   P5, maxval 255, intensities in [0, 1] scaled by 255
    masks/{id}.pgm    P5, maxval 255, pixel value = class index
    manifest.json     {"splits", "num_classes", "image_size", "spec", "shapes"}

Three-channel images are stored as three stacked planes in one PGM of
height 3H; ``in_channels`` in the manifest spec says how to split them.
"""
from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError

# ----------------------------------------------------------------------------
# PGM

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pgm(buf: bytes) -> np.ndarray:
    """Decode P5 bytes into a uint8 (H, W) array."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"truncated PGM header at byte {pos}")
        tokens.append((m.group(1), m.start(1)))
        pos = m.end(1)
    (magic, _), *rest = tokens
    if magic != b"P5":
        raise FormatError(f"not a binary PGM: magic {magic!r} at byte 0")
    vals = []
    for tok, off in rest:
        if not tok.isdigit():
            raise FormatError(f"malformed PGM header field {tok!r} at byte {off}")
        vals.append(int(tok))
    width, height, maxval = vals
    if maxval != 255:
        raise FormatError(f"PGM maxval must be 255, got {maxval} at byte {rest[2][1]}")
    if width < 1 or height < 1:
        raise FormatError(f"PGM extents {width}x{height} at byte {rest[0][1]} must be positive")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after PGM header at byte {pos}")
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated PGM payload at byte {pos}: need {need}, have {len(buf) - pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def encode_pgm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise FormatError("PGM values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def load_pgm(path, normalize: bool = True) -> np.ndarray:
    """Read a PGM; ``normalize`` maps to float64 in [0, 1], otherwise raw uint8."""
    try:
        raw = parse_pgm(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return raw / 255.0 if normalize else raw


def save_pgm(arr, path, normalized: bool = True) -> None:
    """Write a PGM; float data in [0, 1] is rounded to 8 bits when ``normalized``."""
    arr = np.asarray(getattr(arr, "data", arr))
    if normalized and np.issubdtype(arr.dtype, np.floating):
        arr = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(encode_pgm(arr))


# ----------------------------------------------------------------------------
# samples and synthetic data

@dataclass
class SegmentationSample:
    image: np.ndarray  # (Cin, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) int64
    id: str = ""

    def copy(self) -> "SegmentationSample":
        return SegmentationSample(self.image.copy(), self.mask.copy(), self.id)


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 3
    shapes_per_image: tuple[int, int] = (2, 4)
    shape_types: tuple[str, ...] = ("ellipse", "rectangle", "ring")
    background: tuple[float, float] = (0.05, 0.2)
    # intensity range per foreground class, cycled if fewer than classes
    class_intensity: tuple[tuple[float, float], ...] = ((0.45, 0.6), (0.75, 0.95), (0.3, 0.4))
    noise_sigma: float = 0.03
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "shape_types", tuple(self.shape_types))
        object.__setattr__(self, "background", tuple(self.background))
        object.__setattr__(self, "class_intensity", tuple(tuple(r) for r in self.class_intensity))
        if self.num_classes < 2 or self.num_classes > 256:
            raise ConfigError(f"num_classes must be in [2, 256], got {self.num_classes}")
        unknown = set(self.shape_types) - {"ellipse", "rectangle", "ring"}
        if unknown or not self.shape_types:
            raise ConfigError(f"unknown shape types {sorted(unknown)}")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        return cls(**d)


def rasterize(shape: Mapping, size: int) -> np.ndarray:
    """Boolean (size, size) mask of one shape, sampled at integer pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = shape["type"]
    if kind == "ellipse":
        return ((yy - shape["cy"]) / shape["ry"]) ** 2 + ((xx - shape["cx"]) / shape["rx"]) ** 2 <= 1.0
    if kind == "rectangle":
        return (yy >= shape["y0"]) & (yy <= shape["y1"]) & (xx >= shape["x0"]) & (xx <= shape["x1"])
    if kind == "ring":
        d2 = (yy - shape["cy"]) ** 2 + (xx - shape["cx"]) ** 2
        return (d2 >= shape["r_in"] ** 2) & (d2 <= shape["r_out"] ** 2)
    raise ConfigError(f"unknown shape type {kind!r}")


def _random_shape(rng: np.random.Generator, kind: str, size: int, cls: int, intensity: float) -> dict:
    lo, hi = 0.1 * size, 0.9 * size
    cy, cx = (float(v) for v in rng.uniform(lo, hi, 2))
    s = {"type": kind, "class": cls, "intensity": float(intensity)}
    if kind == "ellipse":
        ry, rx = (float(v) for v in rng.uniform(0.08 * size, 0.22 * size, 2))
        s.update(cy=cy, cx=cx, ry=ry, rx=rx)
    elif kind == "rectangle":
        hh, hw = (float(v) for v in rng.uniform(0.06 * size, 0.2 * size, 2))
        s.update(y0=cy - hh, y1=cy + hh, x0=cx - hw, x1=cx + hw)
    else:
        r_out = float(rng.uniform(0.12 * size, 0.22 * size))
        r_in = float(r_out * rng.uniform(0.4, 0.65))
        s.update(cy=cy, cx=cx, r_out=r_out, r_in=r_in)
    return s


def synth_sample(spec: SyntheticSpec, index: int) -> tuple[SegmentationSample, list[dict]]:
    """One deterministic sample from (spec.seed, index) plus its shape list."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    k = spec.num_classes
    lo, hi = spec.shapes_per_image
    count = int(rng.integers(max(lo, k - 1), max(hi, k - 1) + 1))
    classes = [1 + (i % (k - 1)) if i < k - 1 else int(rng.integers(1, k)) for i in range(count)]
    shapes = []
    for cls in classes:
        kind = spec.shape_types[int(rng.integers(len(spec.shape_types)))]
        a, b = spec.class_intensity[(cls - 1) % len(spec.class_intensity)]
        shapes.append(_random_shape(rng, kind, n, cls, rng.uniform(a, b)))

    mask = np.zeros((n, n), dtype=np.int64)
    plane = np.full((n, n), rng.uniform(*spec.background))
    for s in shapes:
        m = rasterize(s, n)
        mask[m] = s["class"]
        plane[m] = s["intensity"]
    chans = []
    for c in range(spec.in_channels):
        tint = 1.0 if spec.in_channels == 1 else (0.8, 1.0, 0.9)[c]
        chans.append(np.clip(plane * tint + rng.normal(0.0, spec.noise_sigma, (n, n)), 0.0, 1.0))
    image = np.stack(chans)
    # quantize now so in-memory samples equal what a PGM round-trip gives back
    image = np.floor(image * 255.0 + 0.5) / 255.0
    return SegmentationSample(image, mask, f"case{index:04d}"), shapes


def synth_dataset(spec: SyntheticSpec, n_train: int, n_val: int, n_test: int, out_dir) -> dict:
    """Write images, masks and manifest.json under ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    splits = {"train": [], "val": [], "test": []}
    shapes = {}
    index = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for _ in range(count):
            sample, sh = synth_sample(spec, index)
            write_sample(sample, out)
            splits[split].append(sample.id)
            shapes[sample.id] = sh
            index += 1
    manifest = {
        "splits": splits,
        "num_classes": spec.num_classes,
        "image_size": spec.image_size,
        "spec": spec.to_dict(),
        "shapes": shapes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def write_sample(sample: SegmentationSample, root) -> None:
    root = Path(root)
    cin, h, w = sample.image.shape
    save_pgm(sample.image.reshape(cin * h, w), root / "images" / f"{sample.id}.pgm")
    save_pgm(sample.mask.astype(np.uint8), root / "masks" / f"{sample.id}.pgm", normalized=False)


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset manifest not found: {path}") from None
    for key in ("splits", "num_classes", "image_size"):
        if key not in manifest:
            raise ConfigError(f"{path}: manifest lacks {key!r}")
    return manifest


def load_sample(root, case_id: str, in_channels: int = 1) -> SegmentationSample:
    root = Path(root)
    img = load_pgm(root / "images" / f"{case_id}.pgm")
    mask = load_pgm(root / "masks" / f"{case_id}.pgm", normalize=False).astype(np.int64)
    h, w = mask.shape
    if img.shape != (in_channels * h, w):
        raise FormatError(f"{case_id}: image {img.shape} does not hold {in_channels} planes of {mask.shape}")
    return SegmentationSample(img.reshape(in_channels, h, w), mask, case_id)


def load_split(root, split: str) -> list[SegmentationSample]:
    manifest = read_manifest(root)
    cin = manifest.get("spec", {}).get("in_channels", 1)
    return [load_sample(root, cid, cin) for cid in manifest["splits"].get(split, [])]


# ----------------------------------------------------------------------------
# cropping

def reflect_pad_to(sample: SegmentationSample, crop: int) -> SegmentationSample:
    _, h, w = sample.image.shape
    ph, pw = max(0, crop - h), max(0, crop - w)
    if not (ph or pw):
        return sample
    mode = "reflect" if min(h, w) > 1 else "edge"
    img = np.pad(sample.image, ((0, 0), (0, ph), (0, pw)), mode=mode)
    mask = np.pad(sample.mask, ((0, ph), (0, pw)), mode=mode)
    return SegmentationSample(img, mask, sample.id)


def crop_at(sample: SegmentationSample, y: int, x: int, crop: int) -> SegmentationSample:
    return SegmentationSample(sample.image[:, y:y + crop, x:x + crop].copy(),
                              sample.mask[y:y + crop, x:x + crop].copy(), sample.id)


def random_crop(sample: SegmentationSample, crop: int, rng: np.random.Generator) -> SegmentationSample:
    """Same random crop window for image and mask; reflect-pads first if the image is smaller."""
    s = reflect_pad_to(sample, crop)
    _, h, w = s.image.shape
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return crop_at(s, y, x, crop)


# ----------------------------------------------------------------------------
# augmentation

AUGMENT_ORDER = ("rotation", "scaling", "noise", "blur", "brightness_contrast", "low_res", "gamma", "mirror")


@dataclass(frozen=True)
class AugmentConfig:
    p_rotation: float = 0.2
    p_scaling: float = 0.2
    p_noise: float = 0.2
    p_blur: float = 0.2
    p_brightness_contrast: float = 0.2
    p_low_res: float = 0.2
    p_gamma: float = 0.2
    p_mirror: float = 0.5
    rotation_deg: tuple[float, float] = (0.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    brightness: tuple[float, float] = (-0.2, 0.2)
    contrast: tuple[float, float] = (0.75, 1.25)
    low_res_factor: tuple[float, float] = (1.0, 2.0)
    gamma: tuple[float, float] = (0.7, 1.5)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{f"p_{name}": 0.0 for name in AUGMENT_ORDER})

    @classmethod
    def only(cls, name: str, p: float = 1.0) -> "AugmentConfig":
        if name not in AUGMENT_ORDER:
            raise ConfigError(f"unknown augmentation {name!r}")
        return dataclasses.replace(cls.disabled(), **{f"p_{name}": p})

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def affine_source_coords(h: int, w: int, theta_deg: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for every output pixel of a rotation+zoom about the image centre."""
    t = math.radians(theta_deg)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    cos, sin = math.cos(t), math.sin(t)
    sy = (cos * dy - sin * dx) / scale + cy
    sx = (sin * dy + cos * dx) / scale + cx
    return sy, sx


def warp_image(image: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.map_coordinates(ch, [sy, sx], order=1, mode="nearest") for ch in image])


def warp_mask(mask: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup with edge clamping, so no new labels appear."""
    h, w = mask.shape
    iy = np.clip(np.floor(sy + 0.5).astype(np.int64), 0, h - 1)
    ix = np.clip(np.floor(sx + 0.5).astype(np.int64), 0, w - 1)
    return mask[iy, ix]


def _resize_plane(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = plane.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(plane, [gy, gx], order=1, mode="nearest")


def augment(sample: SegmentationSample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> SegmentationSample:
    """Apply the eight augmentations in fixed order, each gated by its probability."""
    image = sample.image
    mask = sample.mask
    _, h, w = image.shape

    def gate(name: str) -> bool:
        return bool(rng.random() < getattr(cfg, f"p_{name}"))

    if gate("rotation"):
        sy, sx = affine_source_coords(h, w, rng.uniform(*cfg.rotation_deg), 1.0)
        image, mask = warp_image(image, sy, sx), warp_mask(mask, sy, sx)
    if gate("scaling"):
        sy, sx = affine_source_coords(h, w, 0.0, rng.uniform(*cfg.scale))
        image, mask = warp_image(image, sy, sx), warp_mask(mask, sy, sx)
    if gate("noise"):
        image = np.clip(image + rng.normal(0.0, rng.uniform(*cfg.noise_sigma), image.shape), 0.0, 1.0)
    if gate("blur"):
        sigma = rng.uniform(*cfg.blur_sigma)
        image = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in image])
    if gate("brightness_contrast"):
        b = rng.uniform(*cfg.brightness)
        c = rng.uniform(*cfg.contrast)
        m = image.mean()
        image = np.clip((image - m) * c + m + b, 0.0, 1.0)
    if gate("low_res"):
        f = rng.uniform(*cfg.low_res_factor)
        lh, lw = max(1, int(round(h / f))), max(1, int(round(w / f)))
        image = np.stack([_resize_plane(_resize_plane(ch, lh, lw), h, w) for ch in image])
    if gate("gamma"):
        image = np.clip(image, 0.0, 1.0) ** rng.uniform(*cfg.gamma)
    if gate("mirror"):
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if image is sample.image and mask is sample.mask:
        return sample.copy()
    return SegmentationSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys...), so draw order never depends on scheduling."""
    return np.random.default_rng([seed, *keys])
