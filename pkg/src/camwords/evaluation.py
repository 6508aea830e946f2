"""CAM quality metrics, codebook diagnostics and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as tF

from .cam import normalize_maps
from .codebook import encode
from .data import DataConfig, Dataset, generate_dataset, split
from .errors import CamwordsError, ContractError, ShapeError
from .serialization import config_hash
from .training import TrainConfig, TrainedModel, train

logger = logging.getLogger(__name__)


@dataclass
class IoUReport:
    per_class_iou: np.ndarray  # (L + 1,), background first
    miou: float
    confusion: np.ndarray      # (L + 1, L + 1), rows = ground truth, cols = prediction


def confusion_matrix(pred_masks, gt_masks, num_classes: int) -> np.ndarray:
    n = num_classes + 1
    conf = np.zeros((n, n), dtype=np.int64)
    for pred, gt in zip(pred_masks, gt_masks):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in resolution")
        conf += np.bincount(gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel(),
                            minlength=n * n).reshape(n, n)
    return conf


def report_from_confusion(conf: np.ndarray) -> IoUReport:
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    # classes absent from both prediction and ground truth score 1
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), 1.0)
    return IoUReport(iou, float(iou.mean()), conf)


def miou(pred_masks, gt_masks, num_classes: int) -> IoUReport:
    if len(pred_masks) != len(gt_masks):
        raise ShapeError(f"{len(pred_masks)} predictions for {len(gt_masks)} ground-truth masks")
    return report_from_confusion(confusion_matrix(pred_masks, gt_masks, num_classes))


# -- CAM evaluation -------------------------------------------------------------

@torch.no_grad()
def normalized_cams(model: TrainedModel, images: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Image-resolution normalized CAMs ``(N, L, H, W)`` from the eval-mode model."""
    H, W = images.shape[1:3]
    W_img = model.W_img
    out = []
    for i in range(0, len(images), batch_size):
        F = model.features(images[i:i + batch_size])
        raw = torch.einsum("bhwd,dl->blhw", F, W_img)
        rect = tF.interpolate(raw.clamp_min(0), size=(H, W), mode="bilinear", align_corners=False)
        out.append(normalize_maps(rect).numpy())
    return np.concatenate(out) if out else np.zeros((0, W_img.shape[1], H, W), np.float32)


def labels_at_threshold(scores: np.ndarray, present: np.ndarray, theta: float) -> np.ndarray:
    """Batched pseudo labels; matches :func:`camwords.cam.pseudo_labels` per sample."""
    masked = np.where(present[:, :, None, None] > 0, scores, -np.inf)
    best = masked.argmax(axis=1)
    best_score = np.take_along_axis(masked, best[:, None], axis=1)[:, 0]
    return np.where(best_score >= theta, best + 1, 0).astype(np.uint8)


@dataclass
class CamEvaluation:
    best_theta: float
    best: IoUReport
    by_theta: dict[float, float]


def select_threshold(by_theta: dict[float, float]) -> float:
    """Grid argmax; ties go to the smallest threshold."""
    best = max(by_theta.values())
    return min(t for t, v in by_theta.items() if v == best)


def evaluate_cams(model: TrainedModel, dataset: Dataset, theta_grid=None) -> CamEvaluation:
    theta_grid = tuple(theta_grid or model.config.theta_grid)
    scores = normalized_cams(model, dataset.images())
    present = dataset.labels()
    gts = dataset.masks()
    L = present.shape[1]
    reports = {}
    for theta in theta_grid:
        preds = labels_at_threshold(scores, present, theta)
        reports[float(theta)] = report_from_confusion(confusion_matrix(preds, gts, L))
    by_theta = {t: r.miou for t, r in reports.items()}
    best_theta = select_threshold(by_theta)
    return CamEvaluation(best_theta, reports[best_theta], by_theta)


# -- codebook diagnostics -------------------------------------------------------

@torch.no_grad()
def word_frequencies(model: TrainedModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if model.codebook is None:
        raise ContractError("model has no codebook")
    out = []
    for i in range(0, len(images), batch_size):
        F = model.features(images[i:i + batch_size])
        out.append(encode(F, model.codebook.words.detach(), model.config.tau).f_word.numpy())
    return np.concatenate(out)


@torch.no_grad()
def word_label_maps(model: TrainedModel, images: np.ndarray) -> np.ndarray:
    F = model.features(images)
    Y = encode(F, model.codebook.words.detach(), model.config.tau).Y
    return Y.reshape(F.shape[:3]).numpy()


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0):
    """One logistic regression per class; constant-label classes predict that constant."""
    from sklearn.linear_model import LogisticRegression

    probes = []
    for c in range(labels.shape[1]):
        y = labels[:, c].astype(int)
        if y.min() == y.max():
            probes.append(int(y[0]))
            continue
        clf = LogisticRegression(C=100.0, max_iter=2000, random_state=seed)
        clf.fit(features, y)
        probes.append(clf)
    return probes


def probe_predict(probes, features: np.ndarray) -> np.ndarray:
    cols = [np.full(len(features), p) if isinstance(p, int) else p.predict(features) for p in probes]
    return np.stack(cols, axis=1)


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float((pred.astype(int) == labels.astype(int)).mean(axis=0).mean())


def word_frequency_accuracy(model: TrainedModel, dataset: Dataset, train_dataset: Dataset | None = None,
                            seed: int = 0) -> float:
    """Image-label accuracy predicted from soft word frequencies.

    Uses the trained word-to-image head when present (threshold 0.5 on the
    logistic output); otherwise fits a linear probe on ``train_dataset``.
    """
    freqs = word_frequencies(model, dataset.images())
    labels = dataset.labels()
    if model.heads.w2i is not None:
        with torch.no_grad():
            logits = model.heads.w2i(torch.from_numpy(freqs))
        pred = (torch.sigmoid(logits) > 0.5).numpy()
        return per_class_accuracy(pred, labels)
    if train_dataset is None:
        raise ContractError("a model without a word-to-image head needs a train split for the probe")
    probes = fit_linear_probe(word_frequencies(model, train_dataset.images()), train_dataset.labels(), seed)
    return per_class_accuracy(probe_predict(probes, freqs), labels)


def codebook_max_offdiag_cosine(words: torch.Tensor) -> float:
    w = words.detach().double()
    w = w / w.norm(dim=1, keepdim=True)
    sim = w @ w.t()
    sim.fill_diagonal_(0)
    return float(sim.abs().max())


# -- ablation grid ----------------------------------------------------------------

VARIANTS = {
    "baseline": {"strategy": "none", "pooling": "gap"},
    "baseline+HP": {"strategy": "none", "pooling": "hp"},
    "baseline+HP+VWL-L": {"strategy": "learning", "pooling": "hp"},
    "baseline+HP+VWL-M": {"strategy": "memory_bank", "pooling": "hp"},
    "baseline+GMP": {"strategy": "none", "pooling": "gmp"},
    "baseline+LSE": {"strategy": "none", "pooling": "lse"},
    "baseline+GWRP": {"strategy": "none", "pooling": "gwrp"},
    "baseline+HP+VWL-L-noDeCov": {"strategy": "learning", "pooling": "hp", "use_decov": False},
}
TABLE2_VARIANTS = ("baseline", "baseline+HP", "baseline+HP+VWL-L", "baseline+HP+VWL-M")
TABLE6_VARIANTS = ("baseline", "baseline+GWRP", "baseline+LSE", "baseline+HP")


@dataclass(frozen=True)
class GridConfig:
    variants: tuple[str, ...] = TABLE2_VARIANTS
    seeds: tuple[int, ...] = (0, 1, 2)
    base: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    n_train: int = 2000
    overrides: tuple[tuple[str, tuple[tuple[str, object], ...]], ...] = ()

    def variant_config(self, name: str, seed: int) -> TrainConfig:
        extra = dict(VARIANTS.get(name, {}))
        for vname, pairs in self.overrides:
            if vname == name:
                extra.update(dict(pairs))
        if name not in VARIANTS and not extra:
            raise CamwordsError(f"unknown ablation variant {name!r}")
        return dataclasses.replace(self.base, seed=seed, **extra)

    def data_split(self, seed: int) -> tuple[Dataset, Dataset]:
        ds = generate_dataset(self.data, seed)
        return split(ds, self.n_train / self.data.num_samples)


@dataclass
class AblationRow:
    variant: str
    seed: int
    config_hash: str
    miou: float
    best_theta: float
    wall_time: float
    status: str = "ok"
    extras: dict = field(default_factory=dict)


def _cache_path(out_dir, cfg: TrainConfig, data_hash: str) -> Path | None:
    if out_dir is None:
        return None
    return Path(out_dir) / "runs" / f"{cfg.hash()}-{data_hash}.json"


def run_variant(name: str, cfg: TrainConfig, train_ds: Dataset, eval_ds: Dataset, out_dir=None,
                data_hash: str = "") -> tuple[AblationRow, TrainedModel | None]:
    cache = _cache_path(out_dir, cfg, data_hash)
    if cache is not None and cache.exists():
        return AblationRow(**json.loads(cache.read_text())), None
    t0 = time.perf_counter()
    try:
        model = train(cfg, train_ds)
        ev = evaluate_cams(model, eval_ds, cfg.theta_grid)
        extras = {"miou_by_theta": {str(t): v for t, v in ev.by_theta.items()}}
        if model.codebook is not None:
            extras["max_offdiag_cosine"] = codebook_max_offdiag_cosine(model.codebook.words)
            extras["codebook_update_count"] = model.codebook.update_count
        row = AblationRow(name, cfg.seed, cfg.hash(), ev.best.miou, ev.best_theta,
                          time.perf_counter() - t0, "ok", extras)
    except (CamwordsError, FloatingPointError, RuntimeError) as exc:
        logger.warning("variant %s seed %d failed: %s", name, cfg.seed, exc)
        row = AblationRow(name, cfg.seed, cfg.hash(), float("nan"), float("nan"),
                          time.perf_counter() - t0, f"failed: {exc}")
        model = None
    if cache is not None and row.status == "ok":
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(dataclasses.asdict(row), sort_keys=True))
    return row, model


def run_ablation(grid: GridConfig, out_dir=None) -> list[AblationRow]:
    """Train and evaluate every variant for every seed, sequentially.

    With ``out_dir`` set, finished runs are cached by config and data hash
    and reused on the next call.
    """
    rows = []
    data_hash = config_hash({**grid.data.to_dict(), "n_train": grid.n_train})
    for seed in grid.seeds:
        train_ds, eval_ds = grid.data_split(seed)
        for name in grid.variants:
            cfg = grid.variant_config(name, seed)
            row, _ = run_variant(name, cfg, train_ds, eval_ds, out_dir, f"{data_hash}-s{seed}")
            logger.info("%s seed=%d miou=%.4f theta=%.2f (%.0fs)", name, seed, row.miou, row.best_theta,
                        row.wall_time)
            rows.append(row)
    return rows


TABLE_FIELDS = ("variant", "seed", "config_hash", "miou", "best_theta", "status")


def rows_to_csv(rows: list[AblationRow]) -> str:
    """Metric table without wall times, so identical runs give identical bytes."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_FIELDS)
    for r in rows:
        writer.writerow([r.variant, r.seed, r.config_hash, f"{r.miou:.6f}", f"{r.best_theta:.2f}", r.status])
    return buf.getvalue()


def median_by_variant(rows: list[AblationRow]) -> dict[str, float]:
    out = {}
    for name in dict.fromkeys(r.variant for r in rows):
        vals = [r.miou for r in rows if r.variant == name and r.status == "ok"]
        out[name] = float(np.median(vals)) if vals else float("nan")
    return out


def summarize(rows: list[AblationRow]) -> str:
    med = median_by_variant(rows)
    lines = ["variant                          median_mIoU  per-seed"]
    for name, m in med.items():
        per_seed = ", ".join(f"s{r.seed}={r.miou * 100:.2f}" for r in rows if r.variant == name)
        lines.append(f"{name:<32} {m * 100:10.2f}  {per_seed}")
    return "\n".join(lines) + "\n"


def write_tables(rows: list[AblationRow], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(rows))
    (out / "timing.csv").write_text(
        "variant,seed,wall_time\n" + "".join(f"{r.variant},{r.seed},{r.wall_time:.2f}\n" for r in rows))
    summary = {"rows": [dict(dataclasses.asdict(r), wall_time=None) for r in rows],
               "median_miou": median_by_variant(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(summarize(rows))
    return out
