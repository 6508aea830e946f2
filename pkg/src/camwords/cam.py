"""Class activation maps and background-threshold pseudo labels."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as tF

from .errors import ContractError, ParameterError, ShapeError


@dataclass
class ClassActivationMaps:
    raw: torch.Tensor         # (L, h, w)
    rectified: torch.Tensor   # (L, h, w), relu(raw)
    normalized: torch.Tensor  # (L, h, w), per-class max scaled to 1

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "ClassActivationMaps":
        rectified = raw.clamp_min(0)
        return cls(raw, rectified, normalize_maps(rectified))


def normalize_maps(rectified: torch.Tensor) -> torch.Tensor:
    peak = rectified.amax(dim=(-2, -1), keepdim=True)
    safe = torch.where(peak > 0, peak, torch.ones_like(peak))
    return torch.where(peak > 0, rectified / safe, torch.zeros_like(rectified))


def compute_cams(F: torch.Tensor, W_img: torch.Tensor) -> ClassActivationMaps:
    """CAMs for one ``(h, w, d)`` feature map and a ``(d, L)`` weight matrix."""
    if F.ndim != 3 or W_img.ndim != 2 or F.shape[-1] != W_img.shape[0]:
        raise ShapeError(f"feature map {tuple(F.shape)} incompatible with weights {tuple(W_img.shape)}")
    raw = torch.einsum("hwd,dl->lhw", F, W_img.to(F.dtype))
    return ClassActivationMaps.from_raw(raw)


@dataclass
class PseudoLabelMask:
    labels: np.ndarray  # (h, w) over {0..L}, 0 = background
    theta_bg: float


def pseudo_labels(cams: ClassActivationMaps, present, theta_bg: float) -> PseudoLabelMask:
    """Label each pixel with its best present class, or background below threshold.

    Only classes in ``present`` (0-based ids) compete; ties go to the lowest id.
    """
    present = sorted(int(c) for c in present)
    if not present:
        raise ContractError("pseudo labels need at least one present class")
    if theta_bg <= 0:
        raise ParameterError(f"background threshold must be positive, got {theta_bg}")
    scores = cams.normalized.detach().cpu().numpy()[present]
    best = scores.argmax(axis=0)
    best_score = np.take_along_axis(scores, best[None], axis=0)[0]
    ids = np.asarray(present)[best] + 1
    labels = np.where(best_score >= theta_bg, ids, 0).astype(np.uint8)
    return PseudoLabelMask(labels, theta_bg)


def upsample_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an integer ``(h, w)`` mask."""
    mask = np.asarray(mask)
    if tuple(mask.shape) == tuple(size):
        return mask.copy()
    t = torch.from_numpy(mask.astype(np.int64))[None, None].double()
    out = tF.interpolate(t, size=size, mode="nearest")
    return out[0, 0].to(torch.int64).numpy().astype(mask.dtype)


def upsample_cams(cams: ClassActivationMaps, size: tuple[int, int]) -> ClassActivationMaps:
    """Bilinear resize of the raw and rectified maps; normalization is recomputed."""
    if tuple(cams.raw.shape[-2:]) == tuple(size):
        return cams
    def resize(x):
        return tF.interpolate(x[None], size=size, mode="bilinear", align_corners=False)[0]
    rectified = resize(cams.rectified)
    return ClassActivationMaps(resize(cams.raw), rectified, normalize_maps(rectified))


def _jet(x: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def blend_heatmap(image: np.ndarray, score: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Overlay a colour-mapped [0, 1] score map; zero score leaves the pixel as is."""
    weight = alpha * score[..., None]
    return image * (1 - weight) + _jet(score) * weight


def export_heatmaps(image: np.ndarray, cams: ClassActivationMaps, present, out_dir, stem: str,
                    class_names=None) -> list[Path]:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    up = upsample_cams(cams, image.shape[:2])
    norm = up.normalized.detach().cpu().numpy()
    paths = []
    for c in sorted(int(c) for c in present):
        name = class_names[c] if class_names else f"class{c}"
        blended = blend_heatmap(image, norm[c])
        path = out / f"{stem}_{c:02d}_{name}.png"
        Image.fromarray(np.round(np.clip(blended, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)
        paths.append(path)
    return paths
