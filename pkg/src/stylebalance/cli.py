"""Command-line entry point: ``stylebalance <stage> [--config run.yaml] [flags]``.

Each stage writes its artifacts and a ``run.json`` provenance record under
``<out>/<stage>/``; later stages find earlier artifacts there by default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision
import yaml

from . import __version__
from .balancer import augmentation_budget, generate_augmented_set, read_manifest, write_manifest
from .classifier import build_model, load_model, save_model, train_classifier
from .config import TOY_PROFILE, RunConfig, apply_overrides, dump_config, get_key, load_config
from .dataset import (
    LabeledDataset,
    class_histogram,
    load_dataset,
    load_image_folder,
    make_toy_dataset,
    partition_majority_minority,
    save_image,
    load_image,
)
from .errors import StageDependencyError, StyleBalanceError, ValidationError
from .metrics import evaluate, export_attention_maps, rank_confidence
from .styletransfer import load_engine, new_engine, pretrain_encoder, save_engine, train_decoder
from .sweep import SweepSetup, parse_grid, sweep
from .utils import file_checksum, seed_everything

logger = logging.getLogger("stylebalance")

STAGES = ("ingest", "train-style", "augment", "train-clf", "eval", "sweep", "report", "toy-e2e")

# flag -> config key; each flag sets exactly one key
FLAGS = {
    "--seed": "seed",
    "--out": "out",
    "--source": "data.source",
    "--data": "data.root",
    "--labels": "data.labels",
    "--label-column": "data.label_column",
    "--data-workers": "data.workers",
    "--toy-size": "toy.image_size",
    "--toy-eval-per-class": "toy.eval_per_class",
    "--style-backbone": "style.backbone",
    "--style-weights": "style.weights",
    "--iters": "style.iterations",
    "--style-weight": "style.style_weight",
    "--style-lr": "style.lr",
    "--style-lr-decay": "style.lr_decay",
    "--style-batch": "style.batch_size",
    "--style-size": "style.image_size",
    "--pretrain-iters": "style.pretrain_iterations",
    "--pretrain-lr": "style.pretrain_lr",
    "--decoder": "style.decoder",
    "--p1": "budget.p1",
    "--p2": "budget.p2",
    "--alpha": "budget.alpha",
    "--majority": "budget.majority",
    "--backbone": "classifier.backbone",
    "--weights": "classifier.weights",
    "--aug-manifest": "classifier.aug_manifest",
    "--batch": "classifier.batch_size",
    "--lr": "classifier.learning_rate",
    "--epochs": "classifier.epochs",
    "--dropout": "classifier.dropout_p",
    "--focal-alpha": "classifier.focal_alpha",
    "--focal-gamma": "classifier.focal_gamma",
    "--weight-decay": "classifier.weight_decay",
    "--workers": "classifier.workers",
    "--image-size": "classifier.image_size",
    "--head-width": "classifier.head_width",
    "--model": "classifier.model",
    "--sweep-p1": "sweep.p1",
    "--sweep-p2": "sweep.p2",
    "--sweep-workers": "sweep.workers",
    "--no-control": "sweep.control",
    "--split": "report.split",
    "--topk": "report.topk",
    "--attention": "report.attention",
    "--attention-items": "report.attention_items",
}
BOOLEAN_FLAGS = {"--attention": True, "--no-control": False}
# in the sweep stage --p1/--p2 take the grid rather than a single proportion
STAGE_KEYS = {"sweep": {"--p1": "sweep.p1", "--p2": "sweep.p2"}}


def flag_key(stage: str, flag: str) -> str:
    return STAGE_KEYS.get(stage, {}).get(flag, FLAGS[flag])


_DATA = ["--source", "--data", "--labels", "--label-column", "--data-workers", "--toy-size", "--toy-eval-per-class"]
_CLF = ["--backbone", "--weights", "--batch", "--lr", "--epochs", "--dropout", "--focal-alpha", "--focal-gamma",
        "--weight-decay", "--workers", "--image-size", "--head-width"]
STAGE_FLAGS = {
    "ingest": _DATA + ["--p1", "--p2", "--majority"],
    "train-style": _DATA + ["--style-backbone", "--style-weights", "--iters", "--style-weight", "--style-lr",
                            "--style-lr-decay", "--style-batch", "--style-size", "--pretrain-iters",
                            "--pretrain-lr", "--decoder"],
    "augment": _DATA + ["--decoder", "--p1", "--p2", "--alpha", "--majority"],
    "train-clf": _DATA + ["--decoder", "--aug-manifest", "--model"] + _CLF,
    "eval": _DATA + ["--model", "--batch"],
    "sweep": _DATA + ["--decoder", "--alpha", "--p1", "--p2", "--sweep-workers", "--no-control",
                      "--majority"] + _CLF,
    "report": _DATA + ["--model", "--split", "--topk", "--attention", "--attention-items", "--batch"],
}
STAGE_FLAGS["toy-e2e"] = sorted(set().union(*STAGE_FLAGS.values(), {"--sweep-p1", "--sweep-p2"})
                                 - {"--source", "--data", "--labels"})


# ---------------------------------------------------------------------------
# Shared plumbing


def stage_dir(cfg: RunConfig, stage: str) -> Path:
    path = Path(cfg.out) / stage
    path.mkdir(parents=True, exist_ok=True)
    return path


def decoder_path(cfg: RunConfig) -> Path:
    return Path(cfg.style.decoder) if cfg.style.decoder else Path(cfg.out) / "train-style" / "decoder.ckpt"


def model_path(cfg: RunConfig) -> Path:
    return Path(cfg.classifier.model) if cfg.classifier.model else Path(cfg.out) / "train-clf" / "model.ckpt"


def load_data(cfg: RunConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "toy":
        seed = cfg.toy.seed if cfg.toy.seed is not None else cfg.seed
        return make_toy_dataset(cfg.toy.classes, cfg.toy.image_size, seed, cfg.toy.eval_per_class)
    if d.source == "folder":
        return load_image_folder(d.root, workers=d.workers)
    labels = Path(d.labels)
    if not labels.is_absolute() and not labels.exists():
        labels = Path(d.root) / labels
    return load_dataset(d.root, labels, d.label_column, workers=d.workers)


def data_checksum(cfg: RunConfig) -> dict:
    if cfg.data.source == "toy":
        return {"toy_spec": cfg.toy.classes, "toy_seed": cfg.toy.seed if cfg.toy.seed is not None else cfg.seed}
    if cfg.data.source == "csv":
        labels = Path(cfg.data.labels)
        labels = labels if labels.exists() else Path(cfg.data.root) / labels
        return {"labels": str(labels), "labels_sha256": file_checksum(labels)}
    return {"root": cfg.data.root}


def partition_for(cfg: RunConfig, ds: LabeledDataset):
    hist = class_histogram(ds)
    override = None
    if cfg.budget.majority is not None:
        majority = cfg.budget.majority
        if isinstance(majority, str):
            majority = [c.strip() for c in majority.split(",") if c.strip()]
        override = {"majority": majority, "minority": [c for c in hist.counts if c not in majority]}
    return hist, partition_majority_minority(hist, override)


def write_run_record(directory: Path, stage: str, cfg: RunConfig, inputs: Optional[dict] = None,
                     outputs: Sequence[Path] = (), extra: Optional[dict] = None) -> Path:
    """Provenance for everything written by ``stage``: config, seed, versions, checksums."""
    record = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {
            "stylebalance": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "torchvision": torchvision.__version__,
            "numpy": np.__version__,
        },
        "inputs": inputs or {},
        "outputs": {str(Path(p).relative_to(directory) if Path(p).is_relative_to(directory) else p):
                    file_checksum(Path(p)) for p in outputs if Path(p).is_file()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        record.update(extra)
    path = directory / "run.json"
    path.write_text(json.dumps(record, indent=2, default=str))
    (directory / "config.yaml").write_text(dump_config(cfg))
    return path


def _input_record(path: Path) -> dict:
    return {"path": str(path), "sha256": file_checksum(path)}


def _write_metrics(path: Path, metrics) -> Path:
    path.write_text(json.dumps(metrics.as_dict(), indent=2))
    return path


# ---------------------------------------------------------------------------
# Stages


def cmd_ingest(cfg: RunConfig) -> int:
    ds = load_data(cfg)
    hist, part = partition_for(cfg, ds)
    out = stage_dir(cfg, "ingest")
    budget = augmentation_budget(hist, part, cfg.budget.p1, cfg.budget.p2)
    summary = {
        "classes": list(ds.classes),
        "split_sizes": {s: len(ds.split(s)) for s in ("train", "dev", "test")},
        "train_histogram": dict(hist.counts),
        "majority": sorted(part.majority),
        "minority": sorted(part.minority),
        "budget": {"p1": budget.p1, "p2": budget.p2, "per_class": dict(budget.per_class)},
        "warnings": list(ds.warnings),
    }
    path = out / "dataset.json"
    path.write_text(json.dumps(summary, indent=2))
    write_run_record(out, "ingest", cfg, data_checksum(cfg), [path])
    for w in ds.warnings:
        logger.warning(w)
    logger.info("ingested %d items, train histogram %s", len(ds), dict(hist.counts))
    return 0


def cmd_train_style(cfg: RunConfig) -> int:
    if cfg.style.backbone == "vgg19" and not cfg.style.weights:
        raise ValidationError("style.backbone vgg19 needs style.weights (a torchvision vgg19 state dict)")
    seed_everything(cfg.seed)
    ds = load_data(cfg)
    s = cfg.style
    engine = new_engine(s.backbone, Path(s.weights) if s.weights else None, cfg.seed, s.style_weight, s.image_size)
    if s.backbone == "toy":
        logger.info("pretraining toy encoder for %d iterations", s.pretrain_iterations)
        pretrain_encoder(engine, ds, s.pretrain_iterations, s.pretrain_lr, seed=cfg.seed)
    logger.info("training decoder for %d iterations", s.iterations)
    _, history = train_decoder(engine, ds, s.iterations, lr=s.lr, lr_decay=s.lr_decay,
                               batch_size=s.batch_size, seed=cfg.seed)
    out = stage_dir(cfg, "train-style")
    ckpt = save_engine(engine, decoder_path(cfg) if cfg.style.decoder else out / "decoder.ckpt")
    loss_path = out / "loss_history.csv"
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "content", "style"])
        for i, row in enumerate(zip(history.total, history.content, history.style), start=1):
            writer.writerow([i, *row])
    inputs = data_checksum(cfg)
    if s.weights:
        inputs["style_weights"] = _input_record(Path(s.weights))
    write_run_record(out, "train-style", cfg, inputs, [ckpt, loss_path])
    logger.info("decoder checkpoint written to %s", ckpt)
    return 0


def cmd_augment(cfg: RunConfig) -> int:
    dec = decoder_path(cfg)
    engine = load_engine(dec)
    ds = load_data(cfg)
    hist, part = partition_for(cfg, ds)
    budget = augmentation_budget(hist, part, cfg.budget.p1, cfg.budget.p2)
    out = stage_dir(cfg, "augment")
    items = generate_augmented_set(ds, engine, budget, alpha=cfg.budget.alpha, seed=cfg.seed, out_dir=out)
    manifest = write_manifest(items, out / "aug_manifest.csv")
    write_run_record(out, "augment", cfg, {**data_checksum(cfg), "decoder": _input_record(dec)}, [manifest],
                     {"budget": dict(budget.per_class)})
    logger.info("wrote %d augmented images (%s)", len(items), dict(budget.per_class))
    return 0


def _toy_state(cfg: RunConfig) -> Optional[dict]:
    if cfg.classifier.backbone != "toy":
        return None
    # the toy encoder from the style stage doubles as the classifier backbone
    return load_engine(decoder_path(cfg)).encoder.state_dict()


def _check_backbone_weights(cfg: RunConfig) -> Optional[Path]:
    if cfg.classifier.backbone == "toy":
        return None
    if not cfg.classifier.weights:
        raise ValidationError(f"classifier.backbone {cfg.classifier.backbone} needs classifier.weights "
                              "(a torchvision state dict); only the toy backbone trains without one")
    return Path(cfg.classifier.weights)


def _resolve_manifest(cfg: RunConfig) -> Optional[Path]:
    value = cfg.classifier.aug_manifest
    if value in (None, "", "none"):
        return None
    if value == "auto":
        path = Path(cfg.out) / "augment" / "aug_manifest.csv"
        return path if path.is_file() else None
    path = Path(value)
    if not path.is_file():
        raise StageDependencyError(f"augmentation manifest not found: {path} (run augment first)")
    return path


def cmd_train_clf(cfg: RunConfig) -> int:
    weights = _check_backbone_weights(cfg)
    ds = load_data(cfg)
    manifest = _resolve_manifest(cfg)
    augmented = read_manifest(manifest) if manifest else []
    unknown = {it.label for it in augmented} - set(ds.classes)
    if unknown:
        raise ValidationError(f"manifest labels not in the dataset: {sorted(unknown)}")
    config = cfg.classifier.train_config(cfg.seed)
    model = build_model(cfg.classifier.backbone, ds.classes, dropout_p=config.dropout_p,
                        image_size=config.image_size, head_width=config.head_width, weights_path=weights,
                        toy_state=_toy_state(cfg), seed=cfg.seed)
    logger.info("training on %d original + %d augmented images", len(ds.split("train")), len(augmented))
    model, history = train_classifier(model, ds.split("train") + augmented, ds.split("dev"), config)
    out = stage_dir(cfg, "train-clf")
    ckpt = save_model(model, model_path(cfg) if cfg.classifier.model else out / "model.ckpt", config,
                      weights, meta={"seed": cfg.seed, "augmented": len(augmented), "best_epoch": history.best_epoch})
    hist_path = out / "history.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "dev_accuracy", "dev_macro_f1"])
        for r in history.epochs:
            writer.writerow([r.epoch, r.train_loss, r.dev_accuracy, r.dev_macro_f1])
    inputs = data_checksum(cfg)
    if manifest:
        inputs["aug_manifest"] = _input_record(manifest)
    if cfg.classifier.backbone == "toy":
        inputs["decoder"] = _input_record(decoder_path(cfg))
    if weights:
        inputs["weights"] = _input_record(weights)
    write_run_record(out, "train-clf", cfg, inputs, [ckpt, hist_path])
    logger.info("model written to %s (best dev epoch %d)", ckpt, history.best_epoch)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    path = model_path(cfg)
    model, _ = load_model(path)
    ds = load_data(cfg)
    out = stage_dir(cfg, "eval")
    written = []
    for split in ("dev", "test"):
        items = ds.split(split)
        if not items:
            continue
        metrics = evaluate(model, items, cfg.classifier.batch_size)
        written.append(_write_metrics(out / f"metrics_{split}.json", metrics))
        logger.info("%s: accuracy %.4f macro-P %.4f macro-R %.4f macro-F1 %.4f", split, metrics.accuracy,
                    metrics.macro_precision, metrics.macro_recall, metrics.macro_f1)
    write_run_record(out, "eval", cfg, {**data_checksum(cfg), "model": _input_record(path)}, written)
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    weights = _check_backbone_weights(cfg)
    dec = decoder_path(cfg)
    engine = load_engine(dec)
    ds = load_data(cfg)
    _, part = partition_for(cfg, ds)
    setup = SweepSetup(ds, engine, part, cfg.classifier.train_config(cfg.seed), cfg.classifier.backbone,
                       weights_path=weights, alpha=cfg.budget.alpha)
    out = stage_dir(cfg, "sweep")
    grid = sweep(setup, parse_grid(cfg.sweep.p1), parse_grid(cfg.sweep.p2), cfg.seed, out,
                 include_control=cfg.sweep.control, workers=cfg.sweep.workers)
    write_run_record(out, "sweep", cfg, {**data_checksum(cfg), "decoder": _input_record(dec)},
                     [out / "sweep_grid.csv", out / "sweep_grid.txt"],
                     {"seed_policy": "cell seed = base seed XOR sha256(p1,p2)[:31 bits]",
                      "failures": {f"{k[0]:g},{k[1]:g}": v for k, v in grid.failures.items()}})
    print((out / "sweep_grid.txt").read_text(), end="")
    if grid.failures:
        logger.error("%d cell(s) failed; see cells/*/error.txt", len(grid.failures))
        return 1
    return 0


def cmd_report(cfg: RunConfig) -> int:
    path = model_path(cfg)
    model, ckpt = load_model(path)
    ds = load_data(cfg)
    items = ds.split(cfg.report.split)
    if not items:
        raise ValidationError(f"split {cfg.report.split!r} is empty")
    k = min(cfg.report.topk, len(items) // 2) or 1
    tc = ckpt["train_config"]
    most, least = rank_confidence(model, items, k, tc["focal_alpha"], tc["focal_gamma"], cfg.classifier.batch_size)
    out = stage_dir(cfg, "report")
    by_id = {it.item_id: it for it in items}
    ranking = out / "confidence.csv"
    written = [ranking]
    with open(ranking, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "rank", "item_id", "label", "focal_loss"])
        for group, rows in (("most_confident", most), ("least_confident", least)):
            for rank, r in enumerate(rows, start=1):
                writer.writerow([group, rank, r.item_id, r.label, f"{r.loss:.6g}"])
                img = out / "confidence" / f"{group}_{rank:02d}_{r.item_id}.png"
                save_image(load_image(by_id[r.item_id].image_ref), img)
                written.append(img)
    if cfg.report.attention:
        chosen = [by_id[r.item_id] for r in most + least][: cfg.report.attention_items]
        written += export_attention_maps(model, chosen, out / "attention", cfg.classifier.batch_size)
    write_run_record(out, "report", cfg, {**data_checksum(cfg), "model": _input_record(path)}, written)
    logger.info("report written to %s", out)
    return 0


def cmd_toy_e2e(cfg: RunConfig) -> int:
    for stage in (cmd_ingest, cmd_train_style, cmd_augment, cmd_train_clf, cmd_eval):
        stage(cfg)
    cfg = apply_overrides(cfg, {"report.attention": True})
    cmd_report(cfg)
    metrics = json.loads((Path(cfg.out) / "eval" / "metrics_test.json").read_text())
    print(f"toy end-to-end: test accuracy {metrics['accuracy']:.4f}, macro-F1 {metrics['macro_f1']:.4f}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train-style": cmd_train_style,
    "augment": cmd_augment,
    "train-clf": cmd_train_clf,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "toy-e2e": cmd_toy_e2e,
}


# ---------------------------------------------------------------------------
# Argument parsing

STAGE_HELP = {
    "ingest": "load a dataset, print its train histogram and majority/minority split",
    "train-style": "train the style-transfer decoder (and the toy encoder)",
    "augment": "generate same-class stylized images and aug_manifest.csv",
    "train-clf": "train the attention classifier on originals plus augmentations",
    "eval": "accuracy and macro precision/recall/F1 on dev and test",
    "sweep": "train and evaluate one classifier per (p1, p2) cell",
    "report": "confidence ranking and optional attention-map export",
    "toy-e2e": "run every stage on the synthetic dataset with the toy profile",
}


def _flag_help(stage: str, flag: str, defaults: RunConfig) -> str:
    key = flag_key(stage, flag)
    if flag in BOOLEAN_FLAGS:
        return f"set {key}={BOOLEAN_FLAGS[flag]} (default: {get_key(defaults, key)})"
    return f"{key} (default: {get_key(defaults, key)})"


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    parser = argparse.ArgumentParser(
        prog="stylebalance",
        description="Style-transfer augmentation for imbalanced image classification.",
        epilog="Every flag sets one config key; '--set key=value' reaches any other key. "
               "Exit codes: 0 ok, 1 failed sweep cells, 2 invalid input, 3 missing stage artifact, "
               "4 numerical abort.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for stage in STAGES:
        p = sub.add_parser(stage, help=STAGE_HELP[stage], description=STAGE_HELP[stage])
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set toy.classes.D.count=20")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        for flag in ["--seed", "--out"] + STAGE_FLAGS[stage]:
            key = flag_key(stage, flag)
            dest = key.replace(".", "__")
            if flag in BOOLEAN_FLAGS:
                p.add_argument(flag, dest=dest, action="store_const", const=BOOLEAN_FLAGS[flag], default=None,
                               help=_flag_help(stage, flag, defaults))
            else:
                p.add_argument(flag, dest=dest, default=None, metavar=key.split(".")[-1].upper(),
                               help=_flag_help(stage, flag, defaults))
    return parser


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _yaml_scalar(value)
    return out


def _yaml_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = apply_overrides(RunConfig(), TOY_PROFILE) if args.stage == "toy-e2e" else RunConfig()
    flags = {}
    for key in {flag_key(args.stage, f) for f in ["--seed", "--out"] + STAGE_FLAGS[args.stage]}:
        value = getattr(args, key.replace(".", "__"), None)
        if value is not None:
            flags[key] = _yaml_scalar(value) if isinstance(value, str) and key not in _STRING_KEYS else value
    sets = _parse_set(args.set)
    cfg = load_config(args.config, base=base)
    cfg = apply_overrides(cfg, flags)
    for key, value in sets.items():
        if key.startswith("toy.classes."):
            _set_toy_class(cfg, key, value)
        else:
            cfg = apply_overrides(cfg, {key: value})
    return cfg.validate()


# keys whose flag value is always taken verbatim (e.g. a grid like "0.1:1.0:0.1")
_STRING_KEYS = {"out", "data.root", "data.labels", "data.label_column", "style.weights", "style.decoder",
                "classifier.weights", "classifier.aug_manifest", "classifier.model", "sweep.p1", "sweep.p2"}


def _set_toy_class(cfg: RunConfig, key: str, value) -> None:
    parts = key.split(".")[2:]
    if len(parts) != 2 or parts[1] not in ("count", "shape", "palette", "dev", "test"):
        raise ValidationError(f"{key}: expected toy.classes.<name>.<count|shape|palette|dev|test>")
    name, field_ = parts
    cfg.toy.classes.setdefault(name, {})
    cfg.toy.classes[name][field_] = value


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.stage](cfg)
    except StyleBalanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
