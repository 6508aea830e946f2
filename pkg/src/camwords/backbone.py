"""Small convolutional feature extractor.

Four stages of conv3x3 -> BatchNorm -> ReLU. Two of them downsample by 2, so
a 64x64 image yields a 16x16 feature map. Features are tapped after the
final ReLU and returned channels-last, ``(batch, h, w, d)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .serialization import array_checksum, config_hash, read_archive, write_archive

FEATURE_TAP = "post-relu/final-stage"


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 48, 64, 64)
    strides: tuple[int, ...] = (2, 1, 2, 1)
    image_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    bn_momentum: float = 0.1

    @property
    def d(self) -> int:
        return self.widths[-1]

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.image_size[0] // self.total_stride, self.image_size[1] // self.total_stride

    def validate(self) -> None:
        if len(self.widths) != len(self.strides):
            raise ConfigError(f"widths {self.widths} and strides {self.strides} differ in length")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"stage strides must be 1 or 2, got {self.strides}")
        h, w = self.image_size
        stride = self.total_stride
        if h % stride or w % stride:
            raise ConfigError(f"image size {h}x{w} not divisible by total stride {stride}")
        fh, fw = self.feature_size
        if fh % 4 or fw % 4:
            raise ConfigError(f"feature map {fh}x{fw} must have sides divisible by 4")
        if self.d < 8:
            raise ConfigError(f"output channels d={self.d} must be >= 8")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        layers = []
        c_in = config.in_channels
        for width, stride in zip(config.widths, config.strides):
            layers += [
                nn.Conv2d(c_in, width, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(width, momentum=config.bn_momentum),
                nn.ReLU(inplace=False),
            ]
            c_in = width
        self.body = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) images -> (B, h, w, d) features."""
        expected = (*self.config.image_size, self.config.in_channels)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected image batch of shape (B, {', '.join(map(str, expected))}), "
                             f"got {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2)
        return self.body(x).permute(0, 2, 3, 1)


def init_backbone(config: BackboneConfig, seed: int, dtype=torch.float32) -> Backbone:
    config.validate()
    gen = torch.Generator().manual_seed(seed)
    model = Backbone(config)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
    return model.to(dtype)


def extract_features(model: Backbone, images) -> torch.Tensor:
    if not isinstance(images, torch.Tensor):
        images = torch.as_tensor(np.asarray(images))
    return model(images.to(next(model.parameters()).dtype))


def parameter_count(config: BackboneConfig) -> int:
    """Analytic count: bias-free conv weights plus BatchNorm affine terms."""
    total = 0
    c_in = config.in_channels
    for width in config.widths:
        total += width * c_in * 9 + 2 * width
        c_in = width
    return total


def state_checksum(model: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(array_checksum(t.detach().cpu().numpy()).encode())
    return h.hexdigest()


CHECKPOINT_VERSION = 1


def save_backbone(model: Backbone, path) -> None:
    meta = {
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config.to_dict()),
        "feature_tap": FEATURE_TAP,
    }
    write_archive(path, "backbone", CHECKPOINT_VERSION, dict(model.state_dict()), meta)


def load_backbone(path) -> Backbone:
    tensors, meta = read_archive(path, "backbone", CHECKPOINT_VERSION)
    cfg = meta["config"]
    config = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    model = Backbone(config)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model
