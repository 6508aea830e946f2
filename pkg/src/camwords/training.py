"""Training loop: backbone + heads + codebook under one of three strategies.

``none`` is the plain classifier baseline, ``learning`` treats the codebook
as a trainable parameter (word-frequency classification plus DeCov), and
``memory_bank`` moves the codebook toward per-batch word centroids outside
the gradient graph.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pooling
from .backbone import FEATURE_TAP, Backbone, BackboneConfig, init_backbone
from .codebook import Codebook, encode, ema_update, init_codebook, reconstruct_codebook
from .errors import ConfigError, FormatError, NonFiniteLossError, ParameterError, ScheduleError
from .losses import LossBundle, PredictionHeads, loss_image_only, loss_learning, loss_memory
from .serialization import config_hash, read_archive, write_archive

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "learning", "memory_bank")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "learning"
    pooling: str = "hp"
    word_pooling: str = "gap"
    k: int = 32
    gamma: float = 2.0
    tau: float = 1.0
    rho: float = 0.001
    split_sizes: tuple[int, ...] = (1, 2, 4)
    gwrp_decay: float = 0.996
    lse_sharpness: float = 5.0
    use_decov: bool = True
    codebook_init: str = "random"
    epochs: int = 6
    batch_size: int = 16
    base_lr_backbone: float = 0.01
    base_lr_heads: float = 0.1
    momentum: float = 0.9
    lr_power: float = 0.9
    weight_decay: float = 0.0
    hflip: bool = False
    seed: int = 0
    widths: tuple[int, ...] = (32, 48, 64, 64)
    strides: tuple[int, ...] = (2, 1, 2, 1)
    dataset: str = ""
    theta_grid: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("pooling", "word_pooling"):
            if getattr(self, name) not in pooling.POOLINGS:
                raise ConfigError(f"{name} must be one of {pooling.POOLINGS}, got {getattr(self, name)!r}")
        if self.strategy == "memory_bank" and not 0 < self.rho <= 1:
            raise ParameterError(f"rho must be in (0, 1], got {self.rho}")
        positive = ("k", "tau", "epochs", "batch_size", "base_lr_backbone", "base_lr_heads", "lr_power")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.codebook_init not in ("random", "random_sample"):
            raise ConfigError(f"unknown codebook_init {self.codebook_init!r}")
        pooling.PoolConfig(self.split_sizes, self.gamma).validate()

    @property
    def pool_config(self) -> pooling.PoolConfig:
        return pooling.PoolConfig(tuple(self.split_sizes), self.gamma)

    def backbone_config(self, image_size) -> BackboneConfig:
        return BackboneConfig(widths=tuple(self.widths), strides=tuple(self.strides), image_size=tuple(image_size))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- flat key-value text -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        pairs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed config line {line!r}; expected key = value")
            pairs[key.strip()] = value.strip()
        return (base or cls()).with_overrides(pairs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, pairs: dict[str, str]) -> "TrainConfig":
        hints = typing.get_type_hints(type(self))
        changes = {}
        for key, raw in pairs.items():
            if key not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = parse_value(hints[key], raw, key)
        return dataclasses.replace(self, **changes)


def parse_value(hint, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw)
        origin = typing.get_origin(hint)
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(inner(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None
    raise ConfigError(f"unsupported config key type for {key!r}")


def lr_at(iteration: int, max_iter: int, base: float, power: float) -> float:
    if not 0 <= iteration < max_iter:
        raise ScheduleError(f"iteration {iteration} outside schedule [0, {max_iter})")
    return base * (1 - iteration / max_iter) ** power


@dataclass
class TrainState:
    config: TrainConfig
    backbone: Backbone
    heads: PredictionHeads
    codebook: Codebook | None
    optimizer: torch.optim.SGD
    max_iter: int
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.heads.img.out_features


def init_state(config: TrainConfig, image_size, num_classes: int, max_iter: int,
               feature_pool=None) -> TrainState:
    config.validate()
    torch.manual_seed(config.seed)
    backbone = init_backbone(config.backbone_config(image_size), config.seed)
    heads = PredictionHeads(backbone.config.d, config.k, num_classes, with_w2i=config.strategy == "learning")
    heads.reset(config.seed + 1)
    codebook = None
    if config.strategy != "none":
        mode = "learnable" if config.strategy == "learning" else "memory_bank"
        codebook = init_codebook(config.k, backbone.config.d, config.seed + 2, config.codebook_init,
                                 feature_pool=feature_pool, mode=mode)
    other = list(heads.parameters())
    if codebook is not None and codebook.mode == "learnable":
        other.append(codebook.words)
    optimizer = torch.optim.SGD(
        [{"params": list(backbone.parameters()), "lr": config.base_lr_backbone},
         {"params": other, "lr": config.base_lr_heads}],
        lr=config.base_lr_heads, momentum=config.momentum, weight_decay=config.weight_decay,
    )
    return TrainState(config, backbone, heads, codebook, optimizer, max_iter)


@dataclass
class ForwardResult:
    features: torch.Tensor
    bundle: LossBundle
    assignment: object | None


def forward_losses(state: TrainState, images: torch.Tensor, y_img: torch.Tensor,
                   words: torch.Tensor | None = None) -> ForwardResult:
    """Forward pass and strategy-dependent loss.

    ``words`` overrides the codebook matrix (used by gradient probes).
    """
    cfg = state.config
    F = state.backbone(images)
    pool_kwargs = dict(cfg=cfg.pool_config, gwrp_decay=cfg.gwrp_decay, lse_sharpness=cfg.lse_sharpness)
    p_img = state.heads.img(pooling.pool(F, cfg.pooling, **pool_kwargs))
    if cfg.strategy == "none":
        return ForwardResult(F, loss_image_only(p_img, y_img), None)

    C = state.codebook.words if words is None else words
    learning = cfg.strategy == "learning"
    # memory-bank labels never need a gradient path into the backbone
    assignment = encode(F if learning else F.detach(), C, cfg.tau)
    p_word = state.heads.word(pooling.pool(F, cfg.word_pooling, **pool_kwargs))
    if learning:
        p_w2i = state.heads.w2i(assignment.f_word)
        bundle = loss_learning(p_img, y_img, p_word, assignment.y_word, p_w2i, C, use_decov=cfg.use_decov)
    else:
        bundle = loss_memory(p_img, y_img, p_word, assignment.y_word)
    return ForwardResult(F, bundle, assignment)


def _check_finite(bundle: LossBundle, step: int) -> None:
    for name, value in bundle.as_floats().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, step, value)


def train_step(state: TrainState, images: torch.Tensor, y_img: torch.Tensor,
               lr_scale: float = 1.0) -> tuple[TrainState, LossBundle]:
    cfg = state.config
    state.backbone.train()
    result = forward_losses(state, images, y_img)
    _check_finite(result.bundle, state.step)

    lrs = [lr_scale * lr_at(state.step, state.max_iter, base, cfg.lr_power)
           for base in (cfg.base_lr_backbone, cfg.base_lr_heads)]
    for group, lr in zip(state.optimizer.param_groups, lrs):
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    result.bundle.total.backward()
    state.optimizer.step()

    if cfg.strategy == "memory_bank":
        C_prime = reconstruct_codebook(result.assignment.Y, result.features, state.codebook)
        ema_update(state.codebook, C_prime, cfg.rho)

    record = {"step": state.step, "lr": lrs[0], "lr_heads": lrs[1], **result.bundle.as_floats()}
    state.history.append(record)
    state.step += 1
    return state, result.bundle


def codebook_gradient(state: TrainState, images: torch.Tensor, y_img: torch.Tensor) -> torch.Tensor:
    """Analytic d(total loss)/dC at the current state; zeros when C is unused."""
    words = state.codebook.words.detach().clone().requires_grad_(True)
    state.backbone.train()
    total = forward_losses(state, images, y_img, words=words).bundle.total
    (grad,) = torch.autograd.grad(total, words, allow_unused=True)
    return torch.zeros_like(words) if grad is None else grad


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _flip_mask(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xF11B]).random(n) < 0.5


# -- checkpoints ------------------------------------------------------------------

def _state_tensors(state: TrainState) -> dict:
    tensors = {}
    for name, t in state.backbone.state_dict().items():
        tensors[f"backbone.{name}"] = t
    for name, t in state.heads.state_dict().items():
        tensors[f"heads.{name}"] = t
    if state.codebook is not None:
        tensors["codebook.words"] = state.codebook.words.detach()
    opt = state.optimizer.state_dict()
    for pid, pstate in sorted(opt["state"].items()):
        buf = pstate.get("momentum_buffer")
        if buf is not None:
            tensors[f"optimizer.{pid}.momentum_buffer"] = buf
    return tensors


def save_checkpoint(state: TrainState, path, metrics: dict | None = None) -> None:
    cfg = state.config
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "backbone_config": state.backbone.config.to_dict(),
        "feature_tap": FEATURE_TAP,
        "num_classes": state.num_classes,
        "step": state.step,
        "epoch": state.epoch,
        "max_iter": state.max_iter,
        "codebook_mode": state.codebook.mode if state.codebook is not None else None,
        "codebook_update_count": state.codebook.update_count if state.codebook is not None else 0,
        "metrics": metrics or {},
    }
    write_archive(path, "checkpoint", CHECKPOINT_VERSION, _state_tensors(state), meta)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    tensors, meta = read_archive(path, "checkpoint", CHECKPOINT_VERSION)
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    if cfg.hash() != meta["config_hash"]:
        raise FormatError(f"{path}: config hash mismatch")
    image_size = tuple(meta["backbone_config"]["image_size"])
    # codebook rows are overwritten below, so skip data-dependent initialization
    state = init_state(cfg.replace(codebook_init="random"), image_size, meta["num_classes"], meta["max_iter"])
    state.config = cfg
    state.backbone.load_state_dict({k[len("backbone."):]: torch.from_numpy(v)
                                    for k, v in tensors.items() if k.startswith("backbone.")})
    state.heads.load_state_dict({k[len("heads."):]: torch.from_numpy(v)
                                 for k, v in tensors.items() if k.startswith("heads.")})
    if state.codebook is not None:
        words = torch.from_numpy(tensors["codebook.words"])
        with torch.no_grad():
            if state.codebook.mode == "learnable":
                state.codebook.words.copy_(words)
            else:
                state.codebook.words = words.clone()
        state.codebook.update_count = meta["codebook_update_count"]
    opt_state = state.optimizer.state_dict()
    for key, value in tensors.items():
        if key.startswith("optimizer."):
            pid = int(key.split(".")[1])
            opt_state["state"][pid] = {"momentum_buffer": torch.from_numpy(value)}
    state.optimizer.load_state_dict(opt_state)
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    return state, meta


# -- full training ------------------------------------------------------------------

@dataclass
class TrainedModel:
    config: TrainConfig
    backbone: Backbone
    heads: PredictionHeads
    codebook: Codebook | None
    history: list[dict]
    metrics: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @torch.no_grad()
    def features(self, images, batch_size: int = 64) -> torch.Tensor:
        self.backbone.eval()
        images = torch.as_tensor(np.asarray(images, dtype=np.float32))
        out = [self.backbone(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return torch.cat(out) if out else torch.zeros(0)

    @property
    def W_img(self) -> torch.Tensor:
        return self.heads.W_img.detach()


def _dataset_tensors(dataset):
    images = torch.from_numpy(dataset.images())
    labels = torch.from_numpy(dataset.labels())
    return images, labels


def train(config: TrainConfig, dataset, checkpoint_dir=None, log_path=None, resume_from=None,
          max_epochs: int | None = None) -> TrainedModel:
    """Run ``epochs * ceil(n / batch_size)`` SGD steps.

    ``max_epochs`` stops early (for resume tests) without changing the schedule.
    """
    config.validate()
    torch.use_deterministic_algorithms(True)
    images, labels = _dataset_tensors(dataset)
    n = len(images)
    steps_per_epoch = math.ceil(n / config.batch_size)
    max_iter = config.epochs * steps_per_epoch

    if resume_from is not None:
        state, meta = load_checkpoint(resume_from)
        if meta["config_hash"] != config.hash():
            raise ConfigError("checkpoint was produced with a different configuration")
    else:
        pool = None
        if config.codebook_init == "random_sample" and config.strategy != "none":
            probe = init_backbone(config.backbone_config(images.shape[1:3]), config.seed)
            probe.eval()
            with torch.no_grad():
                pool = probe(images[: config.batch_size])
        state = init_state(config, tuple(images.shape[1:3]), labels.shape[1], max_iter, feature_pool=pool)

    log_fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        last_epoch = config.epochs if max_epochs is None else min(config.epochs, max_epochs)
        while state.epoch < last_epoch:
            order = torch.from_numpy(batch_order(config.seed, state.epoch, n))
            flips = torch.from_numpy(_flip_mask(config.seed, state.epoch, n))
            for b in range(steps_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                x = images[idx]
                if config.hflip:
                    f = flips[idx]
                    x = torch.where(f[:, None, None, None], x.flip(2), x)
                _, bundle = train_step(state, x, labels[idx])
                if log_fh:
                    log_fh.write(json.dumps(state.history[-1], sort_keys=True) + "\n")
            state.epoch += 1
            last = state.history[-1]
            logger.info("epoch %d/%d step %d total %.4f (%.1fs)", state.epoch, config.epochs,
                        state.step, last["total"], time.perf_counter() - t0)
            if checkpoint_dir is not None:
                save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.ckpt")
    finally:
        if log_fh:
            log_fh.close()

    return TrainedModel(config, state.backbone, state.heads, state.codebook, state.history,
                        {"train_seconds": time.perf_counter() - t0, "steps": state.step})


def model_from_checkpoint(path) -> TrainedModel:
    state, meta = load_checkpoint(path)
    return TrainedModel(state.config, state.backbone, state.heads, state.codebook, [], meta.get("metrics", {}))


def save_model(model: TrainedModel, path) -> None:
    """Final model checkpoint (no optimizer state)."""
    tensors = {f"backbone.{k}": v for k, v in model.backbone.state_dict().items()}
    tensors.update({f"heads.{k}": v for k, v in model.heads.state_dict().items()})
    if model.codebook is not None:
        tensors["codebook.words"] = model.codebook.words.detach()
    meta = {
        "config": model.config.to_dict(),
        "config_hash": model.config_hash,
        "backbone_config": model.backbone.config.to_dict(),
        "feature_tap": FEATURE_TAP,
        "num_classes": model.heads.img.out_features,
        "step": len(model.history),
        "epoch": model.config.epochs,
        "max_iter": max(len(model.history), 1),
        "codebook_mode": model.codebook.mode if model.codebook is not None else None,
        "codebook_update_count": model.codebook.update_count if model.codebook is not None else 0,
        "metrics": {k: v for k, v in model.metrics.items() if k != "train_seconds"},
    }
    write_archive(path, "checkpoint", CHECKPOINT_VERSION, tensors, meta)
