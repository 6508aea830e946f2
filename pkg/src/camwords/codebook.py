"""Visual-word codebook: encoding and the two update strategies.

Pixel features are encoded against the codebook by cosine similarity, turned
into word probabilities by a temperature softmax, and quantized to hard word
labels. A codebook is either a trainable parameter (``learnable``) or a
gradient-free memory bank moved toward per-batch word centroids by an
exponential moving average (``memory_bank``).

All encoding functions accept a single unfolded map ``(hw, d)`` or a batch
``(..., hw, d)``; leading axes are carried through.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, InitializationError, ParameterError, ShapeError
from .serialization import array_checksum, read_archive, write_archive

MODES = ("learnable", "memory_bank")
CODEBOOK_VERSION = 1


class Codebook:
    """k x d word matrix plus its update mode and EMA step counter."""

    def __init__(self, words: torch.Tensor, mode: str = "learnable", update_count: int = 0):
        if mode not in MODES:
            raise ParameterError(f"codebook mode must be one of {MODES}, got {mode!r}")
        if words.ndim != 2 or words.shape[0] < 2:
            raise ShapeError(f"codebook must be a k x d matrix with k >= 2, got {tuple(words.shape)}")
        if mode == "learnable":
            self.words = torch.nn.Parameter(words.detach().clone())
        else:
            self.words = words.detach().clone()
        self.mode = mode
        self.update_count = int(update_count)

    @property
    def k(self) -> int:
        return self.words.shape[0]

    @property
    def d(self) -> int:
        return self.words.shape[1]

    def __repr__(self):
        return f"Codebook(k={self.k}, d={self.d}, mode={self.mode!r}, update_count={self.update_count})"


def init_codebook(k: int, d: int, seed: int, method: str = "random", feature_pool=None,
                  mode: str = "learnable", dtype=torch.float32) -> Codebook:
    if k < 2 or d < 2:
        raise ParameterError(f"codebook needs k >= 2 and d >= 2, got k={k}, d={d}")
    gen = torch.Generator().manual_seed(seed)
    if method == "random":
        words = torch.randn(k, d, generator=gen, dtype=torch.float64)
        words = words / words.norm(dim=1, keepdim=True)
    elif method == "random_sample":
        if feature_pool is None:
            raise InitializationError("random_sample initialization needs a feature pool")
        pool = torch.as_tensor(feature_pool).reshape(-1, d).to(torch.float64)
        pool = pool[pool.norm(dim=1) > 0]
        if pool.shape[0] < k:
            raise InitializationError(
                f"random_sample needs at least k={k} nonzero pixel features, pool has {pool.shape[0]}"
            )
        idx = torch.randperm(pool.shape[0], generator=gen)[:k]
        words = pool[idx]
    else:
        raise ParameterError(f"unknown codebook init method {method!r}")
    return Codebook(words.to(dtype), mode=mode)


def _words(C) -> torch.Tensor:
    return C.words if isinstance(C, Codebook) else C


def similarity(F: torch.Tensor, C) -> torch.Tensor:
    """Cosine similarity between every pixel feature and every word.

    ``F`` is ``(..., hw, d)``; result is ``(..., hw, k)``. Zero-norm pixels
    get similarity 0 to every word.
    """
    words = _words(C)
    if F.shape[-1] != words.shape[-1]:
        raise ShapeError(f"feature dim {F.shape[-1]} does not match codebook dim {words.shape[-1]}")
    word_norm = words.norm(dim=-1)
    if bool((word_norm == 0).any()):
        raise ContractError("codebook contains an all-zero word")
    f_norm = F.norm(dim=-1, keepdim=True)
    safe = torch.where(f_norm > 0, f_norm, torch.ones_like(f_norm))
    S = (F / safe) @ (words / word_norm[:, None]).transpose(-1, -2)
    S = torch.where(f_norm > 0, S, torch.zeros_like(S))
    return S.clamp(-1.0, 1.0)


def assign_probabilities(S: torch.Tensor, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature tau must be positive, got {tau}")
    z = tau * S
    z = z - z.amax(dim=-1, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(dim=-1, keepdim=True)


def hard_labels(P: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(Y, y_word, W)``; ties go to the lowest word index.

    ``Y`` is ``(..., hw)`` int64, ``y_word`` is ``(..., k)`` float 0/1 and
    ``W`` the ``(..., hw, k)`` one-hot expansion. None carry gradient.
    """
    P = P.detach()
    k = P.shape[-1]
    # torch.argmax returns the first maximal index
    Y = P.argmax(dim=-1)
    W = torch.nn.functional.one_hot(Y, k).to(P.dtype)
    y_word = (W.sum(dim=-2) > 0).to(P.dtype)
    return Y, y_word, W


def soft_frequency(P: torch.Tensor) -> torch.Tensor:
    return P.mean(dim=-2)


def reconstruct_codebook(Y: torch.Tensor, F: torch.Tensor, C) -> torch.Tensor:
    """Mean pixel feature per word; words with no pixels keep their old row.

    All pixels in ``Y``/``F`` are pooled, whatever the leading batch axes.
    """
    words = _words(C).detach()
    F = F.detach().reshape(-1, words.shape[1]).to(words.dtype)
    Y = Y.reshape(-1)
    if Y.shape[0] != F.shape[0]:
        raise ShapeError(f"labels cover {Y.shape[0]} pixels but features cover {F.shape[0]}")
    k = words.shape[0]
    sums = torch.zeros_like(words).index_add_(0, Y, F)
    counts = torch.bincount(Y, minlength=k).to(words.dtype)
    filled = counts > 0
    out = words.clone()
    out[filled] = sums[filled] / counts[filled, None]
    return out


def ema_update(C: Codebook, C_prime: torch.Tensor, rho: float) -> Codebook:
    """In-place momentum update ``C <- rho * C' + (1 - rho) * C``."""
    if not 0 < rho <= 1:
        raise ParameterError(f"momentum rho must be in (0, 1], got {rho}")
    if C.mode != "memory_bank":
        raise ContractError("ema_update applies to memory_bank codebooks only")
    if tuple(C_prime.shape) != tuple(C.words.shape):
        raise ShapeError(f"reconstructed codebook {tuple(C_prime.shape)} vs codebook {tuple(C.words.shape)}")
    with torch.no_grad():
        if rho == 1:
            C.words = C_prime.detach().clone().to(C.words.dtype)
        else:
            # C + rho * (C' - C): same value, and exactly a no-op when C' == C
            C.words = C.words + rho * (C_prime.detach().to(C.words.dtype) - C.words)
    C.update_count += 1
    return C


@dataclass
class WordAssignment:
    S: torch.Tensor
    P: torch.Tensor
    Y: torch.Tensor
    W: torch.Tensor
    y_word: torch.Tensor
    f_word: torch.Tensor


def encode(F: torch.Tensor, C, tau: float) -> WordAssignment:
    """Run the full encoding chain on channels-last features ``(..., h, w, d)``."""
    flat = F.reshape(*F.shape[:-3], -1, F.shape[-1])
    S = similarity(flat, C)
    P = assign_probabilities(S, tau)
    Y, y_word, W = hard_labels(P)
    return WordAssignment(S, P, Y, W, y_word, soft_frequency(P))


# -- persistence --------------------------------------------------------------

def save_codebook(C: Codebook, path) -> None:
    words = C.words.detach().cpu().numpy()
    meta = {"mode": C.mode, "update_count": C.update_count, "k": C.k, "d": C.d,
            "words_sha256": array_checksum(words)}
    write_archive(path, "codebook", CODEBOOK_VERSION, {"words": words}, meta)


def load_codebook(path) -> Codebook:
    from .errors import FormatError

    tensors, meta = read_archive(path, "codebook", CODEBOOK_VERSION)
    words = tensors.get("words")
    if words is None or array_checksum(words) != meta.get("words_sha256"):
        raise FormatError(f"{path}: stored codebook checksum does not match its contents")
    return Codebook(torch.from_numpy(words), mode=meta["mode"], update_count=meta["update_count"])


def export_word_tiles(images: np.ndarray, labels: np.ndarray, k: int, out_dir, stride: int,
                      per_word: int = 8, tile: int = 16) -> list[Path]:
    """Write one strip per word of image crops centred on pixels assigned to it.

    ``images`` is ``(N, H, W, 3)`` in [0, 1]; ``labels`` the ``(N, h, w)``
    hard word map. Crops are taken at the feature cell's image-space centre.
    Words that were never assigned get no file.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, H, W, _ = images.shape
    half = tile // 2
    padded = np.pad(images, ((0, 0), (half, half), (half, half), (0, 0)), mode="constant")
    written = []
    for j in range(k):
        hits = np.argwhere(labels == j)
        if len(hits) == 0:
            continue
        step = max(len(hits) // per_word, 1)
        crops = []
        for img_idx, fy, fx in hits[::step][:per_word]:
            cy = int(fy) * stride + stride // 2 + half
            cx = int(fx) * stride + stride // 2 + half
            crops.append(padded[img_idx, cy - half:cy + half, cx - half:cx + half])
        strip = np.concatenate(crops, axis=1)
        path = out / f"word_{j:04d}.png"
        Image.fromarray(np.round(strip * 255).astype(np.uint8), mode="RGB").save(path)
        written.append(path)
    return written
