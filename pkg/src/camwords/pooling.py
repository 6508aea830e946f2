"""Spatial aggregators over channels-last feature maps ``(..., h, w, d)``.

Hybrid pooling averages multi-split local-max branches with a weighted GAP
term. GMP, LSE and GWRP are provided as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, ParameterError, ShapeError

POOLINGS = ("gap", "gmp", "lse", "gwrp", "hp")


@dataclass(frozen=True)
class PoolConfig:
    split_sizes: tuple[int, ...] = (1, 2, 4)
    gamma: float = 2.0

    def validate(self, h: int | None = None, w: int | None = None) -> None:
        if 1 not in self.split_sizes:
            raise ConfigError(f"split sizes {self.split_sizes} must include 1")
        if any(r < 1 for r in self.split_sizes) or len(set(self.split_sizes)) != len(self.split_sizes):
            raise ConfigError(f"split sizes must be distinct positive integers, got {self.split_sizes}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if h is not None:
            bad = [r for r in self.split_sizes if h % r or w % r]
            if bad:
                raise ConfigError(f"split sizes {bad} do not divide feature map {h}x{w}")


def gap(F: torch.Tensor) -> torch.Tensor:
    return F.mean(dim=(-3, -2))


def local_max_pool(F: torch.Tensor, r: int) -> torch.Tensor:
    """Channel-wise max over an r x r grid of equal bins -> ``(..., r, r, d)``.

    Gradient goes to the first (lowest flat index) maximum of each bin.
    """
    h, w, d = F.shape[-3:]
    if r < 1 or h % r or w % r:
        raise ShapeError(f"split size r={r} must divide feature map height h={h} and width w={w}")
    lead = F.shape[:-3]
    bins = F.reshape(*lead, r, h // r, r, w // r, d)
    bins = bins.movedim(-4, -3).reshape(*lead, r, r, (h // r) * (w // r), d)
    return bins.max(dim=-2).values


def gmp(F: torch.Tensor) -> torch.Tensor:
    return local_max_pool(F, 1)[..., 0, 0, :]


def branch_pool(F: torch.Tensor, r: int) -> torch.Tensor:
    return local_max_pool(F, r).mean(dim=(-3, -2))


def hybrid_pool(F: torch.Tensor, cfg: PoolConfig = PoolConfig()) -> torch.Tensor:
    cfg.validate(F.shape[-3], F.shape[-2])
    total = sum(branch_pool(F, r) for r in cfg.split_sizes)
    return (total + cfg.gamma * gap(F)) / (cfg.gamma + len(cfg.split_sizes))


def gwrp(F: torch.Tensor, decay: float = 0.996) -> torch.Tensor:
    if not 0 < decay < 1:
        raise ParameterError(f"GWRP decay must be in (0, 1), got {decay}")
    flat = F.reshape(*F.shape[:-3], -1, F.shape[-1])
    ranked = flat.sort(dim=-2, descending=True).values
    n = ranked.shape[-2]
    weights = decay ** torch.arange(n, dtype=F.dtype, device=F.device)
    return (ranked * weights[:, None]).sum(dim=-2) / weights.sum()


def lse(F: torch.Tensor, sharpness: float = 5.0) -> torch.Tensor:
    if not sharpness > 0:
        raise ParameterError(f"LSE sharpness must be positive, got {sharpness}")
    flat = F.reshape(*F.shape[:-3], -1, F.shape[-1])
    n = flat.shape[-2]
    return (torch.logsumexp(sharpness * flat, dim=-2) - torch.log(torch.tensor(float(n), dtype=F.dtype))) / sharpness


def pool(F: torch.Tensor, name: str, cfg: PoolConfig = PoolConfig(), gwrp_decay: float = 0.996,
         lse_sharpness: float = 5.0) -> torch.Tensor:
    if name == "gap":
        return gap(F)
    if name == "gmp":
        return gmp(F)
    if name == "hp":
        return hybrid_pool(F, cfg)
    if name == "gwrp":
        return gwrp(F, gwrp_decay)
    if name == "lse":
        return lse(F, lse_sharpness)
    raise ConfigError(f"unknown pooling {name!r}; choose from {POOLINGS}")
