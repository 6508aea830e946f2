"""Command-line interface.

Every ``TrainConfig`` field is exposed as ``--field-name`` on the commands
that train, and every ``DataConfig`` field as ``--field-name`` on
``generate-data`` (``--data-field-name`` on ``ablate`` and ``sweep``).
Errors print ``camwords: <category> error: <message>`` and exit with the
category's code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import typing
from pathlib import Path

import numpy as np

from .data import DataConfig, Dataset, generate_dataset, load_dataset, save_dataset, split
from .errors import CamwordsError, ConfigError
from .training import TrainConfig, parse_value

logger = logging.getLogger("camwords")

DEFAULT_TRAIN_FRACTION = 2000 / 2200


def _flag(name: str, prefix: str = "") -> str:
    return "--" + prefix + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, prefix: str = "", skip=()) -> None:
    group = parser.add_argument_group(f"{cls.__name__} keys")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        group.add_argument(_flag(f.name, prefix), dest=prefix.replace("-", "_") + f.name, default=None,
                           metavar="VALUE", help=f"(default: {default})")


def _collect(args, cls, prefix: str = "", skip=()) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        value = getattr(args, prefix.replace("-", "_") + f.name, None)
        if value is not None:
            out[f.name] = value
    return out


def _data_config(pairs: dict[str, str], base: DataConfig | None = None) -> DataConfig:
    hints = typing.get_type_hints(DataConfig)
    changes = {k: parse_value(hints[k], v, k) for k, v in pairs.items()}
    return dataclasses.replace(base or DataConfig(), **changes)


def _train_config(args) -> TrainConfig:
    base = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
    return base.with_overrides(_collect(args, TrainConfig))


def _split(ds: Dataset, fraction: float, which: str) -> Dataset:
    if which == "all":
        return ds
    train_part, eval_part = split(ds, fraction)
    return train_part if which == "train" else eval_part


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _data_config(_collect(args, DataConfig))
    ds = generate_dataset(cfg, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import save_model, train

    cfg = _train_config(args)
    if not cfg.dataset and not args.data:
        raise ConfigError("no dataset given; pass --data DIR or set the dataset config key")
    data_dir = args.data or cfg.dataset
    cfg = cfg.replace(dataset=str(data_dir))
    ds = _split(load_dataset(data_dir), args.train_fraction, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    model = train(cfg, ds, checkpoint_dir=out / "checkpoints", log_path=out / "train_log.jsonl",
                  resume_from=args.resume)
    save_model(model, out / "model.ckpt")
    print(f"trained {model.metrics['steps']} steps; model written to {out / 'model.ckpt'} "
          f"(config hash {model.config_hash})")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_cams, word_frequency_accuracy
    from .training import model_from_checkpoint

    model = model_from_checkpoint(args.model)
    full = load_dataset(args.data)
    ds = _split(full, args.train_fraction, args.split)
    grid = tuple(parse_value(tuple[float, ...], args.theta_grid, "theta_grid")) if args.theta_grid else None
    res = evaluate_cams(model, ds, grid)
    summary = {
        "config_hash": model.config_hash,
        "num_images": len(ds),
        "miou": res.best.miou,
        "best_theta": res.best_theta,
        "per_class_iou": dict(zip(["background", *full.class_names], res.best.per_class_iou.tolist())),
        "miou_by_theta": {f"{t:.2f}": v for t, v in res.by_theta.items()},
    }
    if model.codebook is not None:
        train_part = _split(full, args.train_fraction, "train") if model.heads.w2i is None else None
        summary["word_frequency_accuracy"] = word_frequency_accuracy(model, ds, train_part)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", summary)
    (out / "eval.csv").write_text("theta,miou\n" + "".join(f"{t:.2f},{v:.6f}\n" for t, v in res.by_theta.items()))
    print(f"mIoU {res.best.miou * 100:.2f} at theta {res.best_theta:.2f} on {len(ds)} images")
    return 0


def _run_dir(args) -> Path:
    name = args.run_name or time.strftime("%Y%m%d-%H%M%S")
    return Path(args.out) / name


def _grid_from_args(args, variants, overrides=()):
    from .evaluation import GridConfig

    data = _data_config(_collect(args, DataConfig, prefix="data-"))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    return GridConfig(variants=tuple(variants), seeds=seeds, base=_train_config(args), data=data,
                      n_train=args.n_train, overrides=tuple(overrides))


def _finish_grid(args, grid) -> int:
    from .evaluation import run_ablation, summarize, write_tables

    rows = run_ablation(grid, out_dir=Path(args.out) / "cache")
    out = write_tables(rows, _run_dir(args))
    print(summarize(rows), end="")
    print(f"tables written to {out}")
    return 0 if all(r.status == "ok" for r in rows) else 1


def cmd_ablate(args) -> int:
    from .evaluation import VARIANTS

    variants = [v for v in args.variants.split(",") if v]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {sorted(VARIANTS)}")
    return _finish_grid(args, _grid_from_args(args, variants))


def cmd_sweep(args) -> int:
    from .evaluation import VARIANTS

    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    hints = typing.get_type_hints(TrainConfig)
    if args.param not in hints:
        raise ConfigError(f"unknown config key {args.param!r}")
    names, overrides = [], []
    for raw in args.values.split(";" if ";" in args.values else ","):
        value = parse_value(hints[args.param], raw.strip(), args.param)
        name = f"{args.variant}@{args.param}={raw.strip()}"
        names.append(name)
        overrides.append((name, tuple({**VARIANTS[args.variant], args.param: value}.items())))
    return _finish_grid(args, _grid_from_args(args, names, overrides))


def _load_for_export(args):
    from .training import model_from_checkpoint

    model = model_from_checkpoint(args.model)
    ds = _split(load_dataset(args.data), args.train_fraction, args.split)
    n = min(args.count, len(ds))
    return model, ds, n


def cmd_export_heatmaps(args) -> int:
    import torch

    from .cam import compute_cams, export_heatmaps

    model, ds, n = _load_for_export(args)
    images = ds.images()[:n]
    feats = model.features(images)
    written = 0
    for i in range(n):
        cams = compute_cams(feats[i], model.W_img)
        present = np.flatnonzero(ds.samples[i].y_img).tolist()
        with torch.no_grad():
            written += len(export_heatmaps(images[i], cams, present, args.out, f"img{i:05d}", ds.class_names))
    print(f"wrote {written} heatmaps to {args.out}")
    return 0


def cmd_export_words(args) -> int:
    from .codebook import export_word_tiles
    from .evaluation import word_label_maps

    model, ds, n = _load_for_export(args)
    if model.codebook is None:
        raise ConfigError("model was trained without a codebook")
    images = ds.images()[:n]
    labels = word_label_maps(model, images)
    stride = images.shape[1] // labels.shape[1]
    paths = export_word_tiles(images, labels, model.config.k, args.out, stride, per_word=args.per_word)
    print(f"wrote {len(paths)} word strips to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------

def _add_split_flags(p, default_split: str) -> None:
    p.add_argument("--split", choices=("train", "eval", "all"), default=default_split,
                   help=f"which part of the dataset to use (default: {default_split})")
    p.add_argument("--train-fraction", type=float, default=DEFAULT_TRAIN_FRACTION,
                   help="leading fraction of samples that forms the train split (default: 2000/2200)")


def _add_grid_flags(p) -> None:
    p.add_argument("--out", required=True, help="output directory; tables go to OUT/<run-name>/")
    p.add_argument("--run-name", default=None, help="subfolder name (default: current timestamp)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: 0,1,2)")
    p.add_argument("--n-train", type=int, default=2000, help="train images per seed (default: 2000)")
    p.add_argument("--config", help="flat key = value TrainConfig file applied before flags")
    _add_dataclass_flags(p, TrainConfig, skip=("seed",))
    _add_dataclass_flags(p, DataConfig, prefix="data-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camwords", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate-data", help="render a synthetic dataset to a directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_dataclass_flags(p, DataConfig)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", help="dataset directory (overrides the dataset key)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value TrainConfig file applied before flags")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_split_flags(p, "train")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CAM mIoU of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-grid", help="comma-separated background thresholds (default: model config)")
    _add_split_flags(p, "eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate named variants over seeds")
    p.add_argument("--variants", default="baseline,baseline+HP,baseline+HP+VWL-L,baseline+HP+VWL-M")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="vary one config key for one variant")
    p.add_argument("--variant", default="baseline+HP+VWL-L")
    p.add_argument("--param", required=True, help="TrainConfig key to vary")
    p.add_argument("--values", required=True, help="comma-separated values (';' separates tuple values)")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("export-heatmaps", cmd_export_heatmaps, "write CAM overlays per present class"),
                                 ("export-words", cmd_export_words, "write image crops per visual word")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--count", type=int, default=16, help="number of images to use (default: 16)")
        if name == "export-words":
            p.add_argument("--per-word", type=int, default=8, help="crops per word (default: 8)")
        _add_split_flags(p, "eval")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("camwords: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CamwordsError as exc:
        print(f"camwords: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"camwords: io error: {exc}", file=sys.stderr)
        return 7


if __name__ == "__main__":
    sys.exit(main())
