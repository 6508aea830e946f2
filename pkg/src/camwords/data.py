"""Synthetic multi-label shapes dataset with pixel-level ground truth.

Each image holds 1-3 non-overlapping shapes on a low-contrast textured
background. A shape kind identifies the class; colours are random so the
geometry is the only class cue. Two-tone shapes have a distinct interior
colour, which gives every object at least two parts.

The ground-truth masks are used for evaluation only.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError
from .serialization import config_hash

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "cross", "hexagon", "star", "ellipse")
FILL_STYLES = ("solid", "two-tone")
BACKGROUNDS = ("flat", "gradient", "speckle")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    num_samples: int = 2200
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 5
    shapes_per_image: tuple[int, int] = (1, 3)
    backgrounds: tuple[str, ...] = BACKGROUNDS
    size_range: tuple[float, float] = (0.13, 0.21)
    two_tone_prob: float = 0.75
    stride: int = 4

    def validate(self) -> None:
        h, w = self.image_size
        bad = [f"{name}={v}" for name, v in (("height", h), ("width", w)) if v % self.stride]
        if bad:
            raise ConfigError(
                f"image size {h}x{w} not divisible by backbone stride {self.stride}: " + ", ".join(bad)
            )
        if not 2 <= self.num_classes <= len(SHAPE_KINDS):
            raise ConfigError(f"num_classes must be in [2, {len(SHAPE_KINDS)}], got {self.num_classes}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi <= 3:
            raise ConfigError(f"shapes_per_image must satisfy 1 <= lo <= hi <= 3, got {self.shapes_per_image}")
        unknown = set(self.backgrounds) - set(BACKGROUNDS)
        if unknown or not self.backgrounds:
            raise ConfigError(f"unknown background families: {sorted(unknown)}")
        smin, smax = self.size_range
        if not 0 < smin <= smax < 0.5:
            raise ConfigError(f"size_range must lie in (0, 0.5), got {self.size_range}")
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be positive, got {self.num_samples}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        for key in ("image_size", "shapes_per_image", "backgrounds", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    shape_kind: str
    fill_style: str
    center: tuple[float, float]  # (y, x), normalized
    size: float                  # bounding radius, fraction of the shorter side
    rotation: float


@dataclass
class Sample:
    image: np.ndarray    # (H, W, 3) float32 in [0, 1]
    gt_mask: np.ndarray  # (H, W) uint8 over {0..L}
    y_img: np.ndarray    # (L,) uint8
    shapes: list[ShapeSpec] = field(default_factory=list)


@dataclass
class Dataset:
    samples: list[Sample]
    seed: int
    class_names: list[str]
    config: DataConfig | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0, 0, 0, 3), np.float32)

    def labels(self) -> np.ndarray:
        return np.stack([s.y_img for s in self.samples]).astype(np.float32)

    def masks(self) -> np.ndarray:
        return np.stack([s.gt_mask for s in self.samples])


# -- rasterization ----------------------------------------------------------

def _shape_regions(kind: str, u: np.ndarray, v: np.ndarray, radius: float):
    """Return (outer, inner) boolean masks in the shape's local frame."""
    rho = np.hypot(u, v)
    if kind == "disk":
        return rho <= radius, rho <= 0.55 * radius
    if kind == "square":
        m = np.maximum(np.abs(u), np.abs(v))
        return m <= radius / math.sqrt(2), m <= 0.38 * radius
    if kind == "triangle":
        def inside(scale):
            ok = np.ones_like(u, dtype=bool)
            for t in range(3):
                a = math.pi / 3 + 2 * math.pi * t / 3
                ok &= u * math.cos(a) + v * math.sin(a) <= scale * radius / 2
            return ok
        return inside(1.0), inside(0.5)
    if kind == "ring":
        band = (rho <= radius) & (rho >= 0.5 * radius)
        return band, band & (rho <= 0.75 * radius)
    if kind == "cross":
        def bars(length, width):
            return ((np.abs(u) <= length) & (np.abs(v) <= width)) | ((np.abs(v) <= length) & (np.abs(u) <= width))
        return bars(0.95 * radius, 0.3 * radius), bars(0.6 * radius, 0.13 * radius)
    if kind == "hexagon":
        def inside(scale):
            ok = np.ones_like(u, dtype=bool)
            for t in range(3):
                a = math.pi / 6 + t * math.pi / 3
                ok &= np.abs(u * math.cos(a) + v * math.sin(a)) <= scale * radius * math.cos(math.pi / 6)
            return ok
        return inside(1.0), inside(0.5)
    if kind == "star":
        theta = np.arctan2(v, u)
        sector = 2 * math.pi / 5
        frac = np.abs(((theta % sector) / sector) - 0.5) * 2  # 1 at tips, 0 between
        limit = radius * (0.45 + 0.55 * frac)
        return rho <= limit, rho <= 0.5 * limit
    if kind == "ellipse":
        e = (u / radius) ** 2 + (v / (0.55 * radius)) ** 2
        return e <= 1.0, e <= 0.3
    raise ConfigError(f"unknown shape kind {kind!r}")


def _random_color(rng, sat=(0.6, 1.0), val=(0.55, 1.0), hue=None):
    h = rng.uniform(0, 1) if hue is None else hue % 1.0
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(*sat), rng.uniform(*val)), dtype=np.float64)


def _background(rng, family: str, h: int, w: int) -> np.ndarray:
    base = _random_color(rng, sat=(0.0, 0.25), val=(0.3, 0.6))
    if family == "flat":
        return np.broadcast_to(base, (h, w, 3)).copy()
    if family == "gradient":
        other = np.clip(base + rng.uniform(-0.12, 0.12, size=3), 0, 1)
        angle = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        t = (np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        return base * (1 - t[..., None]) + other * t[..., None]
    if family == "speckle":
        return np.clip(base + rng.normal(0, 0.05, size=(h, w, 1)), 0, 1) * np.ones(3)
    raise ConfigError(f"unknown background family {family!r}")


def render_sample(config: DataConfig, seed: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    h, w = config.image_size
    short = min(h, w)
    image = _background(rng, config.backgrounds[rng.integers(len(config.backgrounds))], h, w)
    mask = np.zeros((h, w), dtype=np.uint8)

    n_shapes = int(rng.integers(config.shapes_per_image[0], config.shapes_per_image[1] + 1))
    classes = rng.choice(config.num_classes, size=n_shapes, replace=False)
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5
    xx = xx + 0.5

    placed: list[tuple[float, float, float]] = []  # (cy, cx, radius) in pixels
    shapes = []
    for cls in classes:
        kind = SHAPE_KINDS[int(cls)]
        size = rng.uniform(*config.size_range)
        radius = size * short
        rotation = rng.uniform(0, 2 * math.pi)
        fill = "two-tone" if rng.uniform() < config.two_tone_prob else "solid"
        outer_color = _random_color(rng)
        inner_color = _random_color(rng, hue=rng.uniform(0.3, 0.7) + rng.uniform())
        for _ in range(100):
            cy = rng.uniform(radius + 1, h - radius - 1)
            cx = rng.uniform(radius + 1, w - radius - 1)
            if all(math.hypot(cy - py, cx - px) >= radius + pr + 2 for py, px, pr in placed):
                break
        else:
            continue
        placed.append((cy, cx, radius))
        c, s = math.cos(rotation), math.sin(rotation)
        u = c * (xx - cx) + s * (yy - cy)
        v = -s * (xx - cx) + c * (yy - cy)
        outer, inner = _shape_regions(kind, u, v, radius)
        image[outer] = outer_color
        if fill == "two-tone":
            image[inner & outer] = inner_color
        mask[outer] = int(cls) + 1
        shapes.append(ShapeSpec(int(cls), kind, fill, (cy / h, cx / w), size, rotation))

    image_u8 = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    y_img = np.zeros(config.num_classes, dtype=np.uint8)
    present = np.unique(mask)
    y_img[present[present > 0] - 1] = 1
    return Sample(image_u8.astype(np.float32) / 255.0, mask, y_img, shapes)


def generate_dataset(config: DataConfig, seed: int) -> Dataset:
    config.validate()
    samples = [render_sample(config, seed, i) for i in range(config.num_samples)]
    names = list(SHAPE_KINDS[: config.num_classes])
    return Dataset(samples, seed, names, config)


def split(dataset: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = math.ceil(len(dataset) * train_fraction)
    make = lambda s: Dataset(s, dataset.seed, list(dataset.class_names), dataset.config)  # noqa: E731
    return make(dataset.samples[:n_train]), make(dataset.samples[n_train:])


# -- persistence --------------------------------------------------------------

def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    return np.array(Image.open(path), dtype=np.uint8)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write PNG images, PNG masks and ``manifest.txt`` into ``out_dir``.

    Manifest lines are ``key = value``; per-sample lines read
    ``sample.NNNNN = <image file> <mask file> <comma-separated y_img>``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config.to_dict() if dataset.config else {}
    lines = [
        "# camwords synthetic dataset manifest",
        f"format_version = {MANIFEST_VERSION}",
        f"seed = {dataset.seed}",
        f"config_hash = {config_hash(cfg)}",
        f"config = {json.dumps(cfg, sort_keys=True)}",
        f"class_names = {','.join(dataset.class_names)}",
        f"num_samples = {len(dataset)}",
    ]
    for i, s in enumerate(dataset.samples):
        img_name, mask_name = f"image_{i:05d}.png", f"mask_{i:05d}.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="RGB").save(out / img_name, format="PNG")
        save_mask(s.gt_mask, out / mask_name)
        lines.append(f"sample.{i:05d} = {img_name} {mask_name} {','.join(str(int(v)) for v in s.y_img)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = read_manifest(root / "manifest.txt")
    if manifest.get("format_version") != str(MANIFEST_VERSION):
        raise FormatError(
            f"{root}: manifest version {manifest.get('format_version')!r}, expected {MANIFEST_VERSION}"
        )
    cfg_dict = json.loads(manifest.get("config", "{}"))
    config = DataConfig.from_dict(cfg_dict) if cfg_dict else None
    n = int(manifest["num_samples"])
    samples = []
    for i in range(n):
        img_name, mask_name, labels = manifest[f"sample.{i:05d}"].split()
        image = np.array(Image.open(root / img_name).convert("RGB"), dtype=np.float32) / 255.0
        y_img = np.array([int(v) for v in labels.split(",")], dtype=np.uint8)
        samples.append(Sample(image, load_mask(root / mask_name), y_img))
    return Dataset(samples, int(manifest["seed"]), manifest["class_names"].split(","), config)
