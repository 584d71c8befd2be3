"""Synthetic shape-segmentation data, augmentation and on-disk samples.

Each image is a textured background (class 0) with a few occluding shapes.
A shape's class fixes its base colour and its outline kind; colours are
pulled toward a shared grey by ``1 - color_strength`` and perturbed per shape
and per pixel, so colour alone is a strong but imperfect cue.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import ConfigError, strict_from_dict
from .tensor import IGNORE_LABEL, load_stf, save_stf

SPLITS = ("train", "val", "test")
_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}
_KINDS = ("rect", "ellipse", "triangle")


@dataclass
class DatasetSpec:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    train_size: int = 500
    val_size: int = 100
    test_size: int = 100
    seed: int = 0
    min_shapes: int = 2
    max_shapes: int = 5
    min_radius: int = 5
    max_radius: int = 14
    color_noise: float = 0.2  # per-pixel sigma
    shape_color_noise: float = 0.06  # per-shape sigma on the base colour
    color_strength: float = 0.6

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.height < 16 or self.width < 16:
            raise ConfigError("image extents must be >= 16")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")
        if not 1 <= self.min_radius <= self.max_radius:
            raise ConfigError("need 1 <= min_radius <= max_radius")
        if not 0 < self.color_strength <= 1:
            raise ConfigError("color_strength must lie in (0, 1]")
        if self.color_noise < 0 or self.shape_color_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        return strict_from_dict(cls, data, "dataset spec")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W] float64 in [0,1]
    mask: np.ndarray  # [H,W] uint8
    id: str


def class_palette(num_classes: int) -> np.ndarray:
    """Base RGB colour per class; row 0 is the background."""
    palette = np.empty((num_classes, 3))
    palette[0] = (0.5, 0.5, 0.5)
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        palette[c] = _hue_to_rgb(hue)
    return palette


def _hue_to_rgb(h: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0) * 0.8


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODES[split], index]))


def _shape_mask(kind, cy, cx, r, angle, yy, xx, aspect):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == "rect":
        return (np.abs(u) <= r) & (np.abs(v) <= r * aspect)
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (r * aspect)) ** 2 <= 1.0
    # triangle: intersection of three half-planes around the centre
    inside = np.ones_like(u, dtype=bool)
    for t in range(3):
        th = angle + 2 * np.pi * t / 3
        inside &= np.cos(th) * dx + np.sin(th) * dy <= r * 0.55
    return inside


def make_sample(spec: DatasetSpec, split: str, index: int) -> Sample:
    rng = _sample_rng(spec.seed, split, index)
    H, W = spec.height, spec.width
    palette = class_palette(spec.num_classes)
    gray = np.full(3, 0.5)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    # background: gray with a smooth random gradient
    gy, gx = rng.normal(0.0, 0.08, 2)
    bg = gray + rng.normal(0.0, spec.shape_color_noise, 3)
    image = bg[:, None, None] + (gy * (yy - H / 2) / H + gx * (xx - W / 2) / W)[None]
    mask = np.zeros((H, W), dtype=np.uint8)

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        c = int(rng.integers(1, spec.num_classes))
        kind = _KINDS[(c - 1) % len(_KINDS)]
        r = rng.uniform(spec.min_radius, spec.max_radius)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        angle = rng.uniform(0, 2 * np.pi)
        aspect = rng.uniform(0.6, 1.0)
        region = _shape_mask(kind, cy, cx, r, angle, yy, xx, aspect)
        base = spec.color_strength * palette[c] + (1 - spec.color_strength) * gray
        color = base + rng.normal(0.0, spec.shape_color_noise, 3)
        image[:, region] = color[:, None]
        mask[region] = c

    image = image + rng.normal(0.0, spec.color_noise, image.shape)
    # stored as f32 on disk; round here so in-memory and loaded data agree
    image = np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Sample(image, mask, f"{split}-{index:05d}")


def generate(spec: DatasetSpec, split: str) -> Iterator[Sample]:
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}")
    for i in range(spec.split_size(split)):
        yield make_sample(spec, split, i)


def as_arrays(samples) -> tuple[np.ndarray, np.ndarray, list[str]]:
    samples = list(samples)
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks, [s.id for s in samples]


# ---------------------------------------------------------------- augmentation


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a [C,H,W] image."""
    C, H, W = image.shape

    def axis_weights(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(out_h, H)
    x0, x1, wx = axis_weights(out_w, W)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * H / out_h).astype(np.intp), H - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * W / out_w).astype(np.intp), W - 1)
    return mask[np.ix_(rows, cols)]


def apply_augmentation(sample: Sample, flip: bool, scale: float, offset: tuple[int, int]) -> Sample:
    """Flip, rescale, then crop or pad back to the original size.

    ``offset`` is the (y, x) position of the crop window inside the scaled
    image when it is larger, or of the scaled image inside the canvas when it
    is smaller.
    """
    image, mask = sample.image, sample.mask
    _, H, W = image.shape
    if flip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if scale != 1.0:
        nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
        image = resize_bilinear(image, nh, nw)
        mask = resize_nearest(mask, nh, nw)
    out_img = np.zeros((3, H, W))
    out_mask = np.full((H, W), IGNORE_LABEL, dtype=np.uint8)
    nh, nw = mask.shape
    oy, ox = offset
    if nh >= H:
        src_y, dst_y, hh = oy, 0, H
    else:
        src_y, dst_y, hh = 0, oy, nh
    if nw >= W:
        src_x, dst_x, ww = ox, 0, W
    else:
        src_x, dst_x, ww = 0, ox, nw
    out_img[:, dst_y : dst_y + hh, dst_x : dst_x + ww] = image[:, src_y : src_y + hh, src_x : src_x + ww]
    out_mask[dst_y : dst_y + hh, dst_x : dst_x + ww] = mask[src_y : src_y + hh, src_x : src_x + ww]
    return Sample(out_img, out_mask, sample.id)


def augment(sample: Sample, rng: np.random.Generator, scale_range=(0.5, 2.0)) -> Sample:
    """Random horizontal flip (p=0.5) and uniform rescale, cropped/padded back."""
    _, H, W = sample.image.shape
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*scale_range))
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    oy = int(rng.integers(0, abs(nh - H) + 1))
    ox = int(rng.integers(0, abs(nw - W) + 1))
    return apply_augmentation(sample, flip, scale, (oy, ox))


# ---------------------------------------------------------------- disk format


def write_dataset(spec: DatasetSpec, out_dir: str | Path) -> dict:
    """Write every split to ``out_dir``; returns per-split class frequencies."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    summary = {}
    for split in SPLITS:
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        ids = []
        images_with = np.zeros(spec.num_classes, dtype=np.int64)
        for sample in generate(spec, split):
            save_stf(split_dir / f"{sample.id}.image.stf", sample.image, "f32")
            save_stf(split_dir / f"{sample.id}.mask.stf", sample.mask, "u8")
            ids.append(sample.id)
            labels = np.unique(sample.mask)
            images_with[labels[labels < spec.num_classes]] += 1
        manifest = {"split": split, "count": len(ids), "ids": ids}
        (split_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        summary[split] = (images_with / max(len(ids), 1)).tolist()
    return summary


def load_spec(data_dir: str | Path) -> DatasetSpec:
    path = Path(data_dir) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset spec not found: {path}")
    return DatasetSpec.from_dict(json.loads(path.read_text()))


def load_split(data_dir: str | Path, split: str):
    split_dir = Path(data_dir) / split
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"split manifest not found: {manifest_path}")
    ids = json.loads(manifest_path.read_text())["ids"]
    images = np.stack([load_stf(split_dir / f"{i}.image.stf") for i in ids])
    masks = np.stack([load_stf(split_dir / f"{i}.mask.stf") for i in ids])
    return images, masks, ids
