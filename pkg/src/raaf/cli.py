"""Command-line entry point: ``raaf <command> [options]``.

Run configurations are TOML files with three tables::

    out_dir = "runs/demo"

    [data]
    source = "synthetic"     # "synthetic", "cache" (from `raaf ingest`) or "raw"
    # cache = "cache/pamap2"
    # dataset = "pamap2"     # built-in layout name or path to a dataset TOML (source = "raw")
    # data_dir = "/data/PAMAP2_Dataset"

    [model]                  # ModelConfig fields; frame shape, classes and frames come from the data
    n_glimpses = 30

    [train]                  # TrainConfig fields
    epochs = 100

``RAAF_SEED`` overrides ``train.seed``; ``--seed`` overrides both.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernel
from .data import DatasetConfig, builtin_config, load_dataset, read_cache, write_cache
from .exceptions import ConfigError, NumericError, RAAFError
from .frames import ChannelStats, normalize
from .gradcheck import run_suite
from .model import ModelConfig, RAAFNetwork
from .synthetic import salient_quadrant_dataset
from .training import (
    FrameDataset, TrainConfig, _split_validation, check_accounting, echo_config, evaluate, fit_network,
    run_loso, sweep_labeled_data, write_involvement,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("raaf")


# --------------------------------------------------------------------------
# configuration


def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read run config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dataset_config_from(name_or_path: str) -> DatasetConfig:
    p = Path(name_or_path)
    return DatasetConfig.load(p) if p.suffix == ".toml" or p.exists() else builtin_config(name_or_path)


def load_data(cfg: dict, n_frames: int) -> FrameDataset:
    data = dict(cfg.get("data", {}))
    source = data.pop("source", "synthetic")
    if source == "synthetic":
        if "patch" in data:
            data["patch"] = tuple(data["patch"])
        data.setdefault("n_frames", n_frames)
        return salient_quadrant_dataset(**data)
    if source == "cache":
        if "cache" not in data:
            raise ConfigError("data.cache is required for source = 'cache'")
        return read_cache(data["cache"])
    if source == "raw":
        for key in ("dataset", "data_dir"):
            if key not in data:
                raise ConfigError(f"data.{key} is required for source = 'raw'")
        ds, _ = load_dataset(dataset_config_from(data["dataset"]), data["data_dir"], n_frames,
                             stacked=bool(data.get("stacked", False)), subjects=data.get("subjects"))
        return ds
    raise ConfigError(f"unknown data source {source!r}")


def resolve_seed(train: dict, cli_seed: int | None) -> dict:
    train = dict(train)
    env = os.environ.get("RAAF_SEED")
    if env is not None:
        try:
            train["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"RAAF_SEED must be an integer, got {env!r}") from exc
    if cli_seed is not None:
        train["seed"] = cli_seed
    return train


def build_configs(cfg: dict, cli_seed: int | None = None):
    model = dict(cfg.get("model", {}))
    n_frames = int(model.get("n_frames", 5))
    dataset = load_data(cfg, n_frames)
    model.setdefault("frame_shape", dataset.X.shape[2:])
    model.setdefault("n_classes", dataset.n_classes)
    model.setdefault("n_frames", dataset.X.shape[1])
    model_cfg = ModelConfig.from_dict(model)
    if (model_cfg.n_frames, *model_cfg.frame_shape) != dataset.X.shape[1:]:
        raise ConfigError(f"model expects samples of shape ({model_cfg.n_frames}, *{model_cfg.frame_shape}), "
                          f"data has {dataset.X.shape[1:]}")
    train_cfg = TrainConfig.from_dict(resolve_seed(cfg.get("train", {}), cli_seed))
    return dataset, model_cfg, train_cfg


def out_dir_for(args, cfg: dict, default: str) -> Path:
    out = Path(args.out or cfg.get("out_dir", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(dataset: FrameDataset, fold: str | None, test: bool) -> np.ndarray:
    if fold is None:
        return np.arange(len(dataset.y))
    if fold not in set(dataset.subjects):
        raise ConfigError(f"subject {fold!r} not in dataset (have {sorted(set(dataset.subjects))})")
    mask = dataset.subjects == fold
    return np.flatnonzero(mask if test else ~mask)


def _stats_for(dataset: FrameDataset, idx) -> ChannelStats | None:
    if dataset.normalize and dataset.layout is not None and dataset.row_labels is not None:
        return ChannelStats.fit_frames(dataset.X[idx], dataset.layout, dataset.row_labels)
    return None


def _apply_stats(dataset: FrameDataset, X, stats: ChannelStats | None):
    if stats is None:
        return X
    return normalize(X, stats, dataset.layout, dataset.row_labels)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    config = DatasetConfig.load(args.config) if args.config else builtin_config(args.dataset)
    dataset, counters = load_dataset(config, args.data_dir, args.frames, stacked=args.stacked)
    out = Path(args.out)
    write_cache(dataset, out, len(config.rows))
    lines = ["subject,file,rows_in,rows_used,rows_dropped,rows_discarded"]
    lines += [",".join(str(v) for v in row) for row in counters]
    (out / "ingest.csv").write_text("\n".join(lines) + "\n")
    print(f"{len(dataset.y)} samples from {len(counters)} files written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    dataset, model_cfg, train_cfg = build_configs(cfg, args.seed)
    out = out_dir_for(args, cfg, "runs/train")
    idx = _split(dataset, args.fold, test=False)
    fit_idx, val_idx = _split_validation(idx, train_cfg.validation_fraction, kernel.make_rng(train_cfg.seed))
    stats = _stats_for(dataset, fit_idx)
    X = _apply_stats(dataset, dataset.X, stats)
    has_val = len(val_idx) > 0
    fit = fit_network(X[fit_idx], dataset.y[fit_idx], model_cfg, train_cfg,
                      X[val_idx] if has_val else None, dataset.y[val_idx] if has_val else None)
    ckpt = Path(args.checkpoint_out) if args.checkpoint_out else out / "model.raaf"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    fit.net.save(ckpt, {"train": train_cfg.to_dict(), "fold": args.fold,
                        "stats": None if stats is None else stats.to_dict()})
    lines = ["epoch,loss,accuracy,mean_reward,objective,val_accuracy"]
    for m in fit.history:
        val = "" if m.val_accuracy is None else repr(m.val_accuracy)
        lines.append(f"{m.epoch},{m.loss!r},{m.accuracy!r},{m.mean_reward!r},{m.objective!r},{val}")
    (out / "history.csv").write_text("\n".join(lines) + "\n")
    echo_config(out, model_cfg, train_cfg)
    last = fit.history[-1]
    print(f"trained {len(fit.history)} epochs (best {fit.best_epoch}); final train accuracy {last.accuracy:.4f}; "
          f"checkpoint {ckpt}")
    return 0


def _evaluate_checkpoint(args, outputs: str) -> int:
    cfg = load_run_config(args.config)
    net, meta = RAAFNetwork.load(args.checkpoint)
    dataset = load_data(cfg, net.config.n_frames)
    fold = args.fold if args.fold is not None else meta.get("fold")
    idx = _split(dataset, fold, test=True)
    stats = ChannelStats.from_dict(meta["stats"]) if meta.get("stats") else None
    X = _apply_stats(dataset, dataset.X[idx], stats)
    seed = resolve_seed(meta.get("train", {}), args.seed).get("seed", 0)
    report = evaluate(net, X, dataset.y[idx], kernel.make_rng(int(seed) + 3))
    groups = dataset.row_groups
    check_accounting(report, net.config.n_copies, net.config.n_glimpses, net.config.n_frames, groups)
    out = out_dir_for(args, cfg, "runs/eval")
    (out / "heatmap.csv").write_text(report.heatmap.to_csv())
    if groups is not None:
        write_involvement(out / "involvement.csv", report.heatmap, groups, dataset.class_names)
    if outputs == "eval":
        (out / "confusion.csv").write_text(report.confusion.to_csv(dataset.class_names))
        (out / "metrics.csv").write_text(
            "accuracy,n_samples,latency_mean_s,latency_p95_s\n"
            f"{report.accuracy!r},{report.n_samples},{report.latency_mean!r},{report.latency_p95!r}\n"
        )
        print(f"accuracy {report.accuracy:.4f} on {report.n_samples} samples")
    else:
        print(f"heatmap of {int(report.heatmap.counts.sum())} glimpses written to {out}")
    (out / "config.json").write_text(json.dumps({"checkpoint": str(args.checkpoint), "fold": fold, **meta},
                                                indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    return _evaluate_checkpoint(args, "eval")


def cmd_heatmap(args) -> int:
    return _evaluate_checkpoint(args, "heatmap")


def cmd_loso(args) -> int:
    cfg = load_run_config(args.config)
    dataset, model_cfg, train_cfg = build_configs(cfg, args.seed)
    out = out_dir_for(args, cfg, "runs/loso")
    report = run_loso(dataset, model_cfg, train_cfg, out, args.subjects)
    for f in report.folds:
        print(f"fold {f.subject}: accuracy {f.accuracy:.4f} ({f.n_test} samples)")
    print(f"mean accuracy {report.mean_accuracy:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    dataset, model_cfg, train_cfg = build_configs(cfg, args.seed)
    out = out_dir_for(args, cfg, "runs/sweep")
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from exc
    for size, rep in sweep_labeled_data(dataset, model_cfg, train_cfg, sizes, out, args.subjects):
        print(f"{size}: mean accuracy {rep.mean_accuracy:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config)
    if args.checkpoint:
        net, _ = RAAFNetwork.load(args.checkpoint)
    else:
        model = dict(cfg.get("model", {}))
        model.setdefault("frame_shape", (79, 9))
        model.setdefault("n_classes", 6)
        net = RAAFNetwork(ModelConfig.from_dict(model), seed=0)
    c = net.config
    rng = kernel.make_rng(0)
    X = rng.standard_normal((args.samples, c.n_frames, *c.frame_shape))
    times = []
    for k in range(args.samples):
        t0 = time.perf_counter()
        net.forward(X[k : k + 1], rng, keep_cache=False)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    out = out_dir_for(args, cfg, "runs/bench")
    (out / "bench.csv").write_text(
        "samples,latency_mean_s,latency_p95_s,frame_shape,n_copies,n_glimpses,n_frames\n"
        f"{args.samples},{times.mean()!r},{np.percentile(times, 95)!r},{c.frame_shape[0]}x{c.frame_shape[1]},"
        f"{c.n_copies},{c.n_glimpses},{c.n_frames}\n"
    )
    (out / "config.json").write_text(json.dumps({"model": c.to_dict()}, indent=2, sort_keys=True))
    print(f"per-sample latency: mean {times.mean():.4f} s, p95 {np.percentile(times, 95):.4f} s")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(trials=args.trials, seed=args.seed or 0)
    lines = ["check,trials,max_relative_error,tolerance,passed,seconds"]
    for r in results:
        lines.append(f"{r.name},{r.trials},{r.max_error!r},{r.tolerance!r},{r.passed},{r.seconds:.3f}")
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} max rel err {r.max_error:.2e} (< {r.tolerance:g})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    if not all(r.passed for r in results):
        raise NumericError("gradient check failed")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raaf", description="Glimpse-based attention over activity frames.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="raw recordings -> cached frames")
    s.add_argument("--dataset", default="pamap2", help="built-in layout: pamap2 or mhealth")
    s.add_argument("--config", help="dataset layout TOML (overrides --dataset)")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--stacked", action="store_true", help="keep plain stacked rows instead of activity frames")
    s.set_defaults(func=cmd_ingest)

    def common(s, seed=True):
        s.add_argument("--config", help="run configuration TOML")
        s.add_argument("--out", help="output directory")
        if seed:
            s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train one model")
    common(s)
    s.add_argument("--fold", help="hold out this subject")
    s.add_argument("--checkpoint-out")
    s.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                             ("heatmap", cmd_heatmap, "glimpse heatmap and modality involvement")):
        s = sub.add_parser(name, help=text)
        common(s)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--fold", help="evaluate on this subject (default: the training fold)")
        s.set_defaults(func=func)

    s = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    common(s)
    s.add_argument("--subjects", nargs="*", help="only run these folds")
    s.set_defaults(func=cmd_loso)

    s = sub.add_parser("sweep", help="accuracy versus labeled-data size")
    common(s)
    s.add_argument("--sizes", required=True, help="ascending comma-separated sizes")
    s.add_argument("--subjects", nargs="*")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("bench", help="per-sample inference latency")
    common(s, seed=False)
    s.add_argument("--checkpoint")
    s.add_argument("--samples", type=int, default=20)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except RAAFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
