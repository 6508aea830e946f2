"""Classification losses, the DeCov codebook regularizer and the two objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as tF
from torch import nn

from .errors import ContractError, ParameterError


class PredictionHeads(nn.Module):
    """Bias-free 1x1 projections.

    ``W_img`` (d x L) scores image labels and also weights the CAMs,
    ``W_word`` (d x k) scores word presence, and ``W_w2i`` (k x L) maps word
    frequencies to image labels (learning strategy only).
    """

    def __init__(self, d: int, k: int, num_classes: int, with_w2i: bool = False):
        super().__init__()
        self.img = nn.Linear(d, num_classes, bias=False)
        self.word = nn.Linear(d, k, bias=False)
        self.w2i = nn.Linear(k, num_classes, bias=False) if with_w2i else None

    @property
    def W_img(self) -> torch.Tensor:
        return self.img.weight.t()

    def reset(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.img, self.word, self.w2i):
                if layer is None:
                    continue
                bound = 1.0 / layer.in_features ** 0.5
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen) * 2 - 1) * bound)


def soft_margin_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Negated multi-label soft margin log-likelihood, averaged over labels.

    ``p`` holds logits of shape ``(..., L)``; a leading batch is averaged too.
    """
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    if not bool(((y == 0) | (y == 1)).all()):
        raise ParameterError("targets must be binary (0 or 1)")
    # -log sigmoid(p) = softplus(-p); -log(1 - sigmoid(p)) = softplus(p)
    per_label = y * tF.softplus(-p) + (1 - y) * tF.softplus(p)
    return per_label.mean()


def covariance_rows(C: torch.Tensor) -> torch.Tensor:
    centered = C - C.mean(dim=1, keepdim=True)
    return centered @ centered.t() / C.shape[1]


def decov_loss(C: torch.Tensor) -> torch.Tensor:
    cov = covariance_rows(C)
    return 0.5 * (cov.pow(2).sum() - torch.diagonal(cov).pow(2).sum())


@dataclass
class LossBundle:
    cls_img: torch.Tensor
    cls_word: torch.Tensor
    cls_w2i: torch.Tensor
    decov: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in
                ("cls_img", "cls_word", "cls_w2i", "decov", "total")}


def loss_memory(p_img, y_img, p_word, y_word) -> LossBundle:
    cls_img = soft_margin_loss(p_img, y_img)
    cls_word = soft_margin_loss(p_word, y_word)
    zero = torch.zeros((), dtype=cls_img.dtype)
    return LossBundle(cls_img, cls_word, zero, zero, cls_img + cls_word)


def loss_learning(p_img, y_img, p_word, y_word, p_w2i=None, C=None, use_decov: bool = True) -> LossBundle:
    if p_w2i is None or C is None:
        raise ContractError("learning-strategy loss needs word-to-image logits and the codebook")
    base = loss_memory(p_img, y_img, p_word, y_word)
    cls_w2i = soft_margin_loss(p_w2i, y_img)
    decov = decov_loss(C) if use_decov else torch.zeros((), dtype=cls_w2i.dtype)
    return LossBundle(base.cls_img, base.cls_word, cls_w2i, decov, base.total + cls_w2i + decov)


def loss_image_only(p_img, y_img) -> LossBundle:
    """Plain classification objective of the no-word baseline."""
    cls_img = soft_margin_loss(p_img, y_img)
    zero = torch.zeros((), dtype=cls_img.dtype)
    return LossBundle(cls_img, zero, zero, zero, cls_img)
