"""Command-line interface: ``classify``, ``roughness``, ``train``, ``eval``, ``bench``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import bench as bench_mod
from . import roughness as rough
from .data import source_size, split_dataset, synth_dataset
from .io import (
    DatasetError,
    ImageError,
    WeightFileError,
    decode_image,
    encode_image,
    load_dataset,
    load_weights,
    normalize_image,
    resize,
    save_weights,
    write_csv,
)
from .metrics import compute_metrics
from .model import TOY_CONFIG, ModelConfig, forward, model_cost
from .reports import dumps, make_report, write_report
from .training import TrainConfig, evaluate, train

log = logging.getLogger("stridenet")

# --toy presets for the optimisation knobs the reduced model needs
TOY_TRAIN_DEFAULTS = {"batch_size": 8, "init_std": 0.1}
FULL_TRAIN_DEFAULTS = {"batch_size": 16, "init_std": 0.02}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(" ", "").split(",") if t]


def _patch_dims(text) -> tuple[int, int]:
    s = str(text).lower()
    if "x" in s:
        w, h = s.split("x", 1)
        return int(w), int(h)
    return int(s), int(s)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-image work")
    common.add_argument("--config", type=Path, help="YAML/JSON file whose keys mirror the flags")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--toy", action="store_true", help="reduced 32px model (D=8, T=[2,2], H=[2,4], M=4)")
    model.add_argument("--image-size", type=int)
    model.add_argument("--patch-size", type=int)
    model.add_argument("--embed-dim", type=int)
    model.add_argument("--depths", type=_int_list)
    model.add_argument("--heads", type=_int_list)
    model.add_argument("--window", type=int)
    model.add_argument("--num-classes", type=int)
    model.add_argument("--mlp-ratio", type=float)
    model.add_argument("--dropout", type=float)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("dataset", nargs="?", type=Path, help="root with one sub-directory per class")
    data.add_argument("--synthetic", action="store_true", help="use the procedural texture dataset")
    data.add_argument("--n-per-class", type=int, default=200)
    data.add_argument("--split", type=float, default=0.7)
    data.add_argument("--normalize", action="store_true", help="apply ImageNet mean/std to inputs")

    parser = argparse.ArgumentParser(prog="stridenet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("classify", parents=[common], help="terrain class probabilities")
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--normalize", action="store_true")
    subs["classify"] = p

    p = sub.add_parser("roughness", parents=[common], help="roughness maps and overlays")
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--patch", type=_patch_dims, default=(32, 32), help="N or WxH pixels")
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--levels", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--absolute", action="store_true", help="fixed colour scale instead of per-image min-max")
    p.add_argument("--resize", type=int, help="resize inputs to NxN before analysis")
    subs["roughness"] = p

    p = sub.add_parser("train", parents=[common, model, data], help="train a classifier")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--step-size", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.97)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--init-std", type=float)
    subs["train"] = p

    p = sub.add_parser("eval", parents=[common, data], help="metrics of saved weights on a dataset")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--subset", choices=("all", "train", "test"), default="all")
    p.add_argument("--smoothing", type=float, default=0.1)
    subs["eval"] = p

    p = sub.add_parser("bench", parents=[common, model], help="attention cost model report")
    p.add_argument("--sweep-sides", type=_int_list, default=list(bench_mod.DEFAULT_SIDES))
    p.add_argument("--sweep-channels", type=int, default=96)
    p.add_argument("--time", action="store_true", help="also time the attention kernels")
    subs["bench"] = p
    return parser, subs


def _load_config_file(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in cfg.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        cfg = _load_config_file(args.config)
        sub = subs[args.command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - dests - {"config"})
        if unknown:
            sub.error(f"unknown keys in {args.config}: {', '.join(unknown)}")
        converters = {
            "depths": _int_list, "heads": _int_list, "sweep_sides": _int_list, "patch": _patch_dims,
        }
        for key, conv in converters.items():
            if key in cfg and not isinstance(cfg[key], (list, tuple)):
                cfg[key] = conv(cfg[key])
        for key in ("images", "dataset", "weights", "out"):
            if key in cfg:
                cfg[key] = [Path(p) for p in cfg[key]] if key == "images" else Path(cfg[key])
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _echo(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in vars(args).items():
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, (list, tuple)):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = v
    return out


def _model_config(args) -> ModelConfig:
    base = TOY_CONFIG if getattr(args, "toy", False) else ModelConfig()
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(ModelConfig)
        if getattr(args, f.name, None) is not None
    }
    return dataclasses.replace(base, **overrides)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _emit(report: dict, args, filename: str) -> None:
    if args.out is not None:
        write_report(report, args.out / filename)
    print(dumps(report))


# -- commands ------------------------------------------------------------------


def cmd_classify(args) -> int:
    t0 = time.perf_counter()
    weights = load_weights(args.weights)
    config = weights.config
    names = list(weights.class_names or [str(i) for i in range(config.num_classes)])

    def run(path):
        try:
            img = resize(decode_image(path), config.image_size)
            if args.normalize:
                img = normalize_image(img)
            probs = forward(img.astype(np.float32), weights, config).data.astype(np.float64)
        except (ImageError, ValueError) as exc:
            return None, {"input": str(path), "error": str(exc)}
        top = int(np.argmax(probs))
        return {
            "input": str(path),
            "top1": top,
            "label": names[top],
            "probabilities": {n: float(p) for n, p in zip(names, probs)},
        }, None

    results, errors = [], []
    for ok, err in _map(run, args.images, args.threads):
        (results if ok else errors).append(ok or err)
    report = make_report(
        "classify", _echo(args), {"class_names": names, "results": results},
        {"total_seconds": time.perf_counter() - t0}, errors,
    )
    _emit(report, args, "classify_report.json")
    return 0 if results or not args.images else 1


def _validate_roughness_args(args) -> None:
    pw, ph = args.patch
    if pw < 1 or ph < 1:
        raise UsageError(f"--patch must be positive, got {pw}x{ph}")
    if args.stride < 1:
        raise UsageError(f"--stride must be >= 1, got {args.stride}")
    if args.levels < 2:
        raise UsageError(f"--levels must be >= 2, got {args.levels}")
    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError(f"--alpha must lie in [0, 1], got {args.alpha}")
    if args.resize is not None and args.resize < 1:
        raise UsageError("--resize must be positive")
    if args.out is None:
        raise UsageError("roughness needs --out for the overlay and CSV files")


def cmd_roughness(args) -> int:
    _validate_roughness_args(args)
    t0 = time.perf_counter()

    def run(path):
        try:
            img = decode_image(path)
            if args.resize:
                img = resize(img, args.resize)
            rough.grid_shape(img.shape[0], img.shape[1], args.patch, args.stride)
            over, rmap = rough.overlay(img, args.patch, args.stride, args.levels, args.alpha, args.absolute)
        except (ImageError, ValueError) as exc:
            return None, {"input": str(path), "error": str(exc)}
        return (path, over, rmap), None

    computed = _map(run, args.images, args.threads)
    results, errors, used = [], [], set()
    for i, (ok, err) in enumerate(computed):
        if err:
            errors.append(err)
            continue
        path, over, rmap = ok
        stem = path.stem if path.stem not in used else f"{path.stem}_{i}"
        used.add(stem)
        overlay_path = args.out / f"{stem}_overlay.png"
        csv_path = args.out / f"{stem}_roughness.csv"
        encode_image(over, overlay_path)
        write_csv(csv_path, rmap.values)
        results.append({"input": str(path), "overlay": str(overlay_path), "csv": str(csv_path), **rmap.to_dict()})
    report = make_report(
        "roughness", _echo(args), {"results": results},
        {"total_seconds": time.perf_counter() - t0}, errors,
    )
    _emit(report, args, "roughness_report.json")
    return 0 if results or not args.images else 1


def _dataset(args, image_size: int):
    if args.synthetic:
        return synth_dataset(args.n_per_class, source_size(image_size), args.seed)
    if args.dataset is None:
        raise UsageError("give a dataset root or --synthetic")
    return load_dataset(args.dataset, image_size, normalize=args.normalize)


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train needs --out for the weights and reports")
    config = _model_config(args)
    t0 = time.perf_counter()
    dataset = _dataset(args, config.image_size)
    if args.num_classes is None and dataset.num_classes != config.num_classes:
        config = dataclasses.replace(config, num_classes=dataset.num_classes)
    presets = TOY_TRAIN_DEFAULTS if args.toy else FULL_TRAIN_DEFAULTS
    tc = TrainConfig(
        epochs=args.epochs, lr=args.lr, step_size=args.step_size, gamma=args.gamma,
        smoothing=args.smoothing, weight_decay=args.weight_decay,
        batch_size=args.batch_size if args.batch_size is not None else presets["batch_size"],
        seed=args.seed, split=args.split,
        init_std=args.init_std if args.init_std is not None else presets["init_std"],
    )
    t_data = time.perf_counter() - t0

    def on_epoch(rec):
        print(
            f"epoch {rec.epoch:3d}  lr {rec.lr:.6g}  train loss {rec.train_loss:.4f} acc {rec.train_acc:.4f}"
            f"  val loss {rec.val_loss:.4f} acc {rec.val_acc:.4f}",
            file=sys.stderr,
        )

    result = train(config, tc, dataset, on_epoch=on_epoch)
    result.weights.class_names = tuple(dataset.class_names)
    weights_path = args.out / "weights.snw"
    save_weights(result.weights, weights_path)
    epochs = [r.to_dict() for r in result.log]
    report = make_report(
        "train",
        {"args": _echo(args), "model": config.to_dict(), "train": dataclasses.asdict(tc)},
        {
            "weights": str(weights_path),
            "class_names": list(dataset.class_names),
            "train_size": int(len(result.train_index)),
            "test_size": int(len(result.test_index)),
            "epochs": epochs,
            "metrics": result.metrics,
            "confusion_matrix": result.confusion,
        },
        {"data_seconds": t_data, "epoch_seconds": result.epoch_seconds,
         "total_seconds": time.perf_counter() - t0},
    )
    _emit(report, args, "train_report.json")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    weights = load_weights(args.weights)
    dataset = _dataset(args, weights.config.image_size)
    if dataset.num_classes != weights.config.num_classes:
        raise UsageError(
            f"dataset has {dataset.num_classes} classes, weights expect {weights.config.num_classes}"
        )
    if args.subset == "all":
        index = np.arange(len(dataset))
    else:
        tr, te = split_dataset(dataset.labels, args.split, args.seed)
        index = tr if args.subset == "train" else te
    loss, cm = evaluate(weights, dataset, index, args.smoothing)
    report = make_report(
        "eval", _echo(args),
        {"class_names": list(dataset.class_names), "samples": int(len(index)), "loss": loss,
         "metrics": compute_metrics(cm), "confusion_matrix": cm},
        {"total_seconds": time.perf_counter() - t0},
    )
    _emit(report, args, "eval_report.json")
    return 0


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    config = _model_config(args)
    sweep = bench_mod.cost_sweep(args.sweep_sides, args.sweep_channels, config.window)
    outputs = {
        "model": model_cost(config).to_dict(),
        "sweep": {"channels": args.sweep_channels, "window": config.window, "rows": sweep,
                  "exponents": bench_mod.scaling_exponents(sweep) if len(sweep) > 1 else None},
    }
    timings = {}
    if args.time:
        timings["attention"] = bench_mod.time_attention(window=config.window, seed=args.seed)
    timings["total_seconds"] = time.perf_counter() - t0
    report = make_report("bench", {"args": _echo(args), "model": config.to_dict()}, outputs, timings)
    _emit(report, args, "bench_report.json")
    return 0


COMMANDS = {
    "classify": cmd_classify,
    "roughness": cmd_roughness,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"stridenet: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"stridenet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, WeightFileError, ImageError, ValueError, OSError) as exc:
        print(f"stridenet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
