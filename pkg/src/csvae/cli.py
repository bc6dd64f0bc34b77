"""Command-line entry point: train, grid, embed, eval, pca.

Runs are driven by a JSON config validated against a strict schema
(unknown keys are rejected) before any work happens.  Every run
directory receives a resolved-config snapshot sufficient to reproduce
the run bit for bit in deterministic mode.  Exit codes: 0 success,
1 config error, 2 data error, 3 training divergence, 4 checkpoint/
dataset shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, datasets, losses, models, retrieval, training
from .diffmath import ShapeError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_SHAPE = 4


class ConfigError(Exception):
    pass


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "method", "output"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["format", "path"],
            "properties": {
                "format": {"enum": ["idx", "cifar10", "imagedir", "cache"]},
                "path": {"type": "string"},
                "labels_path": {"type": "string"},
                "test_path": {"type": "string"},
                "test_labels_path": {"type": "string"},
                "input_size": {"type": "integer", "minimum": 1},
            },
        },
        "method": {"enum": list(losses.METHODS)},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": list(models.PRESET_NAMES)},
                "latent_dim": {"type": "integer", "minimum": 1},
            },
        },
        "class_specific": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "positive_class": {"type": "integer", "minimum": 0},
                "out_of_domain": {"type": "boolean"},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha_kl": {"type": "number", "exclusiveMinimum": 0},
                "rho": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "deterministic": {"type": "boolean"},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho_values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "alpha_values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "cv_folds": {"type": "integer", "minimum": 2},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dir"],
            "properties": {"dir": {"type": "string"}},
        },
    },
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config validation failed: {err.message}") from err
    return cfg


def _resolve_path(raw: str) -> Path:
    p = Path(raw)
    if not p.is_absolute():
        root = os.environ.get("CSVAE_DATA_DIR")
        if root:
            p = Path(root) / p
    if not p.exists():
        raise FileNotFoundError(f"dataset path not found: {p}")
    return p


def load_dataset_pair(dcfg: dict):
    """Returns (train dataset, test dataset or None) for a dataset section."""
    fmt = dcfg["format"]
    path = _resolve_path(dcfg["path"])
    if fmt == "idx":
        if "labels_path" not in dcfg:
            raise ConfigError("idx datasets need dataset.labels_path")
        train = datasets.load_idx(path, _resolve_path(dcfg["labels_path"]))
        test = None
        if "test_path" in dcfg:
            if "test_labels_path" not in dcfg:
                raise ConfigError("idx datasets need dataset.test_labels_path with test_path")
            test = datasets.load_idx(
                _resolve_path(dcfg["test_path"]), _resolve_path(dcfg["test_labels_path"])
            )
        return train, test
    if fmt == "cifar10":
        return datasets.load_cifar10_bin(path)
    if fmt == "imagedir":
        if "input_size" not in dcfg:
            raise ConfigError("imagedir datasets need dataset.input_size")
        return datasets.load_image_dir(path, dcfg["input_size"]), None
    train = datasets.load_cache(path)
    test = datasets.load_cache(_resolve_path(dcfg["test_path"])) if "test_path" in dcfg else None
    return train, test


def _infer_preset(image_shape) -> str:
    table = {(1, 28, 28): "fashion_mnist", (3, 32, 32): "cifar10", (1, 244, 244): "gray244"}
    if tuple(image_shape) not in table:
        raise ConfigError(
            f"no stock architecture for image shape {tuple(image_shape)}; set model.preset"
        )
    return table[tuple(image_shape)]


def resolve_arch(cfg: dict, image_shape) -> models.ArchSpec:
    mcfg = cfg.get("model", {})
    name = mcfg.get("preset") or _infer_preset(image_shape)
    latent = mcfg.get("latent_dim", 30)
    arch = models.preset(name, latent)
    if tuple(arch.input_shape) != tuple(image_shape):
        raise ShapeError(
            f"dataset images are {tuple(image_shape)} but preset {name} expects {arch.input_shape}"
        )
    return arch


def resolve_train_config(cfg: dict, arch: models.ArchSpec, seed_override=None,
                         positive_override=None) -> training.TrainConfig:
    tcfg = cfg.get("train", {})
    lcfg = cfg.get("loss", {})
    ccfg = cfg.get("class_specific", {})
    method = cfg["method"]
    positive = positive_override if positive_override is not None else ccfg.get("positive_class")
    if method in ("binary_rdvae", "csvae") and positive is None:
        raise ConfigError(f"{method} requires class_specific.positive_class")
    try:
        return training.TrainConfig(
            method=method,
            arch=arch,
            epochs=tcfg.get("epochs", 20),
            batch_size=tcfg.get("batch_size", 128),
            learning_rate=tcfg.get("learning_rate", 1e-3),
            alpha_kl=lcfg.get("alpha_kl", 1.0),
            rho=lcfg.get("rho", 1.0),
            seed=seed_override if seed_override is not None else tcfg.get("seed", 0),
            positive_class=positive,
            out_of_domain=ccfg.get("out_of_domain", False),
            deterministic=tcfg.get("deterministic", False),
        )
    except training.TrainingError as err:
        raise ConfigError(str(err)) from err


def _write_snapshot(cfg: dict, run_cfg: training.TrainConfig, out_dir: Path) -> None:
    snapshot = {"config": cfg, "resolved": run_cfg.to_json()}
    (out_dir / "config.resolved.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _train_one_class(payload):
    train_ds, cls, run_cfg, out_dir, cfg = payload
    result = training.class_specific_run(train_ds, cls, run_cfg)
    class_dir = Path(out_dir) / f"class_{cls}"
    models.save_checkpoint(result.checkpoint, class_dir)
    training.write_metrics_log(result.history, class_dir / "metrics.jsonl")
    _write_snapshot(cfg, run_cfg, class_dir)
    return cls, models.checkpoint_digest(result.checkpoint)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_ds, _ = load_dataset_pair(cfg["dataset"])
    arch = resolve_arch(cfg, train_ds.image_shape)
    out_dir = Path(args.out or cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.all_classes:
        run_cfg = resolve_train_config(cfg, arch, args.seed, positive_override=0)
        if run_cfg.method not in ("binary_rdvae", "csvae"):
            raise ConfigError("--all-classes applies to class-specific methods only")
        payloads = [
            (train_ds, cls, run_cfg, out_dir, cfg) for cls in range(train_ds.num_classes)
        ]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool_exec:
                outcomes = list(pool_exec.map(_train_one_class, payloads))
        else:
            outcomes = [_train_one_class(p) for p in payloads]
        for cls, digest in outcomes:
            print(f"trained {run_cfg.method} class {cls} (seed {run_cfg.seed}) "
                  f"-> {out_dir}/class_{cls} [{digest[:16]}]")
        return EXIT_OK

    run_cfg = resolve_train_config(cfg, arch, args.seed, args.positive_class)
    if run_cfg.method in ("binary_rdvae", "csvae"):
        result = training.class_specific_run(train_ds, run_cfg.positive_class, run_cfg)
    else:
        plan = datasets.make_splits(train_ds, "holdout", seed=run_cfg.seed)
        result = training.train(run_cfg, training.prepare_split_data(train_ds, plan))

    models.save_checkpoint(result.checkpoint, out_dir)
    training.write_metrics_log(result.history, out_dir / "metrics.jsonl")
    _write_snapshot(cfg, run_cfg, out_dir)
    digest = models.checkpoint_digest(result.checkpoint)
    print(f"trained {run_cfg.method} (seed {run_cfg.seed}) -> {out_dir} [{digest[:16]}]")
    return EXIT_OK


def _grid_cell(payload):
    cell, cfg, splits = payload
    rho, alpha = cell
    run_cfg = replace(cfg, alpha_kl=alpha, rho=(rho if rho is not None else cfg.rho),
                      track_val_metrics=True)
    scores = [training.train(run_cfg, s).history[-1]["val_ap"] for s in splits]
    return rho, alpha, float(np.mean(scores))


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    if "grid" not in cfg:
        raise ConfigError("grid command needs a grid section")
    gcfg = cfg["grid"]
    grid = training.GridSpec(
        rho_values=tuple(gcfg.get("rho_values", training.GridSpec.rho_values)),
        alpha_values=tuple(gcfg.get("alpha_values", training.GridSpec.alpha_values)),
    )
    train_ds, _ = load_dataset_pair(cfg["dataset"])
    arch = resolve_arch(cfg, train_ds.image_shape)
    run_cfg = resolve_train_config(cfg, arch, args.seed, args.positive_class)
    out_dir = Path(args.out or cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if run_cfg.method in ("binary_rdvae", "csvae"):
        view = datasets.make_class_specific(
            train_ds, run_cfg.positive_class, run_cfg.out_of_domain, run_cfg.seed
        )
        pool = view.training_pool()
        labels = view.binary_labels
        run_cfg = replace(run_cfg, positive_class=1)
    else:
        pool, labels = None, None

    folds = gcfg.get("cv_folds")
    if folds:
        plans = datasets.make_splits(train_ds, "kfold", seed=run_cfg.seed, folds=folds, pool=pool)
    else:
        plans = [datasets.make_splits(train_ds, "holdout", seed=run_cfg.seed, pool=pool)]
    splits = [training.prepare_split_data(train_ds, p, labels=labels) for p in plans]

    cells = grid.cells(run_cfg.method)
    payloads = [(cell, run_cfg, splits) for cell in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool_exec:
            table = list(pool_exec.map(_grid_cell, payloads))
    else:
        table = [_grid_cell(p) for p in payloads]

    best = min(table, key=lambda row: (-row[2], row[0] if row[0] is not None else 0.0, row[1]))
    lines = ["rho,alpha_kl,score"]
    for rho, alpha, score in table:
        lines.append(f"{'' if rho is None else rho},{alpha},{score}")
    (out_dir / "grid.csv").write_text("\n".join(lines) + "\n")
    best_json = {"rho": best[0], "alpha_kl": best[1], "score": best[2]}
    (out_dir / "best.json").write_text(json.dumps(best_json, indent=2))
    _write_snapshot(cfg, run_cfg, out_dir)
    print(f"grid: {len(table)} cells -> {out_dir}/grid.csv; best {best_json}")
    return EXIT_OK


def _select_split(cfg, which: str):
    train_ds, test_ds = load_dataset_pair(cfg["dataset"])
    if which == "test":
        if test_ds is None:
            raise ConfigError("dataset has no test split; use --split all")
        return test_ds
    if which == "all":
        return train_ds
    plan = datasets.make_splits(train_ds, "holdout", seed=cfg.get("train", {}).get("seed", 0))
    idx = plan.train_indices if which == "train" else plan.val_indices
    return datasets.LabeledDataset(
        train_ds.images[idx], train_ds.labels[idx], train_ds.class_names, train_ds.provenance
    )


def cmd_embed(args) -> int:
    cfg = load_config(args.config)
    ckpt = models.load_checkpoint(args.checkpoint)
    split = _select_split(cfg, args.split)
    emb = retrieval.embed_dataset(ckpt, split.images, split.labels)
    retrieval.save_embeddings(emb, args.out)
    print(f"embedded {len(emb)} samples -> {args.out}")
    return EXIT_OK


def _scan_checkpoints(run_dirs):
    found = []
    for root in run_dirs:
        root = Path(root)
        if not root.exists():
            raise FileNotFoundError(f"runs directory not found: {root}")
        for manifest in sorted(root.rglob("checkpoint.json")):
            found.append(models.load_checkpoint(manifest))
    if not found:
        raise retrieval.EvalError(f"no checkpoints found under {', '.join(map(str, run_dirs))}")
    return found


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _, test_ds = load_dataset_pair(cfg["dataset"])
    if test_ds is None:
        test_ds, _ = load_dataset_pair(cfg["dataset"])
    checkpoints = _scan_checkpoints(args.runs)
    methods = args.methods.split(",") if args.methods else sorted(
        {c.config.get("method") for c in checkpoints}
    )

    reports = []
    for method in methods:
        mine = [c for c in checkpoints if c.config.get("method") == method]
        if not mine:
            raise retrieval.EvalError(f"no checkpoints for method {method}")
        if method in ("binary_rdvae", "csvae"):
            grouped: dict = {}
            for c in mine:
                grouped.setdefault(c.seed, {})[c.config.get("class_of_interest")] = c
        else:
            grouped = {c.seed: c for c in mine}
        reports.append(
            retrieval.evaluate(method, grouped, test_ds.images, test_ds.labels,
                               protocol=args.protocol)
        )

    table = retrieval.report_table(reports, class_names=test_ds.class_names)
    Path(args.out).write_text(table)
    print(table, end="")
    print(f"report -> {args.out}")
    return EXIT_OK


def cmd_pca(args) -> int:
    emb_path = Path(args.embeddings)
    if not emb_path.exists():
        raise FileNotFoundError(f"embeddings file not found: {emb_path}")
    emb = retrieval.load_embeddings(emb_path)
    model = analysis.pca_fit(emb, args.components)
    analysis.export_projection(model, emb, args.out)
    evr = ", ".join(f"{v:.4g}" for v in model.eigenvalues)
    print(f"pca: {args.components} components (eigenvalues {evr}) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--positive-class", type=int, default=None, dest="positive_class")
    p_train.add_argument("--all-classes", action="store_true", dest="all_classes",
                         help="train one class-specific model per class")
    p_train.add_argument("--jobs", type=int, default=1)
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_grid = sub.add_parser("grid", help="hyperparameter grid search")
    p_grid.add_argument("--config", required=True)
    p_grid.add_argument("--seed", type=int, default=None)
    p_grid.add_argument("--positive-class", type=int, default=None, dest="positive_class")
    p_grid.add_argument("--out", default=None)
    p_grid.add_argument("--jobs", type=int, default=1)
    p_grid.set_defaults(func=cmd_grid)

    p_embed = sub.add_parser("embed", help="embed a dataset split with a checkpoint")
    p_embed.add_argument("--config", required=True)
    p_embed.add_argument("--checkpoint", required=True)
    p_embed.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p_embed.add_argument("--out", required=True)
    p_embed.set_defaults(func=cmd_embed)

    p_eval = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--runs", nargs="+", required=True)
    p_eval.add_argument("--methods", default=None)
    p_eval.add_argument("--protocol", choices=["in_domain", "out_of_domain"], default="in_domain")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_pca = sub.add_parser("pca", help="project an embedding file with PCA")
    p_pca.add_argument("--embeddings", required=True)
    p_pca.add_argument("--components", type=int, default=3)
    p_pca.add_argument("--out", required=True)
    p_pca.set_defaults(func=cmd_pca)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, training.TrainingError, losses.LossError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, datasets.DatasetError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except training.DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ShapeError, retrieval.EvalError, retrieval.MetricError, analysis.PcaError) as err:
        print(f"shape/eval error: {err}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
