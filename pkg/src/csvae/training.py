"""Optimization loop, per-class training orchestration, and grid search.

The optimizer is adaptive moment estimation (step size 1e-3, decays
0.9/0.999, epsilon 1e-8) applied to the network parameters and, for the
supervised methods, the class-center matrix.  Deterministic mode pins
the BLAS thread pool to one thread so reductions happen in a fixed
order; together with the seeded generator that makes checkpoints
bitwise reproducible.
"""

from __future__ import annotations

import contextlib
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import diffmath as dm
from . import losses, models, retrieval
from .diffmath import NumericsError, Parameter, Tensor


class TrainingError(Exception):
    """Invalid training configuration."""


class DivergenceError(Exception):
    """Loss became non-finite; carries epoch and the last term breakdown."""

    def __init__(self, epoch: int, parts: dict):
        self.epoch = epoch
        self.parts = parts
        terms = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
        super().__init__(f"training diverged at epoch {epoch}: {terms}")


@dataclass(frozen=True)
class TrainConfig:
    method: str
    arch: models.ArchSpec
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-3
    alpha_kl: float = 1.0
    rho: float = 1.0
    seed: int = 0
    positive_class: int | None = None
    out_of_domain: bool = False
    deterministic: bool = False
    track_val_metrics: bool = True  # opt out when hyperparameters are fixed

    def __post_init__(self):
        if self.method not in losses.METHODS:
            raise TrainingError(f"unknown method {self.method!r}")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0 (0 is a smoke run)")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2 (batch statistics)")
        if self.method in ("binary_rdvae", "csvae") and self.positive_class is None:
            raise TrainingError(f"{self.method} requires positive_class")

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(self.method, self.alpha_kl, self.rho)

    def to_json(self) -> dict:
        d = {
            "method": self.method,
            "arch": models.arch_to_json(self.arch),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "alpha_kl": self.alpha_kl,
            "rho": self.rho,
            "seed": self.seed,
            "positive_class": self.positive_class,
            "out_of_domain": self.out_of_domain,
            "deterministic": self.deterministic,
        }
        return d


@dataclass
class SplitData:
    """Materialized train/validation arrays for one run."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray


def prepare_split_data(dataset, plan, labels=None) -> SplitData:
    """Slice a dataset along a split plan; ``labels`` overrides (binary views)."""
    labels = dataset.labels if labels is None else np.asarray(labels)
    return SplitData(
        train_images=dataset.images[plan.train_indices],
        train_labels=labels[plan.train_indices],
        val_images=dataset.images[plan.val_indices],
        val_labels=labels[plan.val_indices],
    )


@dataclass
class TrainResult:
    checkpoint: models.Checkpoint
    history: list = field(default_factory=list)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _single_thread_if(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _needs_centers(method: str) -> bool:
    return method in ("rdvae", "binary_rdvae", "csvae")


def _eval_metrics(model, centers, cfg: TrainConfig, data: SplitData) -> tuple[float, float]:
    """Eval-mode validation loss (latent = mean, no sampling) and val AP."""
    model.eval()
    lcfg = cfg.loss_config()
    n = len(data.val_images)
    if n == 0:
        model.train()
        return float("nan"), float("nan")
    total = 0.0
    with dm.no_grad():
        for start in range(0, n, max(cfg.batch_size, 2)):
            xb = Tensor(data.val_images[start : start + cfg.batch_size])
            yb = data.val_labels[start : start + cfg.batch_size]
            mu, log_sigma = model.encode_tensors(xb)
            lat = losses.make_batch_latents(mu, log_sigma, yb, centers, cfg.positive_class)
            recon = model.decode_tensors(lat.mu)
            loss, _ = losses.total_loss(lcfg, recon, xb, lat)
            total += loss.item() * len(yb)
    val_loss = total / n

    emb = retrieval.embed_dataset(model, data.val_images, data.val_labels,
                                  batch_size=max(cfg.batch_size, 2))
    try:
        if cfg.positive_class is not None:
            val_ap = retrieval.class_average_precision(emb, cfg.positive_class)
        else:
            val_ap = retrieval.mean_average_precision(emb, skip_singletons=True)
    except (retrieval.MetricError, retrieval.EvalError):
        val_ap = float("nan")
    model.train()
    return val_loss, val_ap


def train(config: TrainConfig, data: SplitData) -> TrainResult:
    """Optimize one model on one split; returns checkpoint plus history."""
    with _single_thread_if(config.deterministic):
        return _train_inner(config, data)


def _train_inner(config: TrainConfig, data: SplitData) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    model = models.VaeModel(config.arch, rng)
    dtype = dm.default_dtype()

    centers = None
    if _needs_centers(config.method):
        n_centers = int(data.train_labels.max()) + 1 if len(data.train_labels) else 2
        if config.positive_class is not None:
            n_centers = max(n_centers, config.positive_class + 1)
        centers = Parameter(rng.standard_normal((n_centers, config.arch.latent_dim)).astype(dtype))

    params = list(model.parameters().values())
    if centers is not None:
        params.append(centers)
    opt = Adam(params, lr=config.learning_rate)
    lcfg = config.loss_config()

    history = []
    n = len(data.train_images)
    for epoch in range(config.epochs):
        model.train()
        perm = rng.permutation(n)
        term_sums: dict = {}
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need at least two samples
            xb = Tensor(data.train_images[idx])
            yb = data.train_labels[idx]
            eps = rng.standard_normal((len(idx), config.arch.latent_dim)).astype(dtype)
            try:
                mu, log_sigma = model.encode_tensors(xb)
                lat = losses.make_batch_latents(mu, log_sigma, yb, centers, config.positive_class)
                z = lat.mu + lat.sigma * Tensor(eps)
                recon = model.decode_tensors(z)
                loss, parts = losses.total_loss(lcfg, recon, xb, lat)
            except NumericsError as err:
                raise DivergenceError(epoch, dict(term_sums)) from err
            if not np.isfinite(loss.item()):
                raise DivergenceError(epoch, parts)
            opt.zero_grad()
            dm.backward(loss)
            opt.step()
            for k, v in parts.items():
                term_sums[k] = term_sums.get(k, 0.0) + v * len(idx)
            seen += len(idx)

        train_terms = {k: v / max(seen, 1) for k, v in term_sums.items()}
        if config.track_val_metrics:
            val_loss, val_ap = _eval_metrics(model, centers, config, data)
        else:
            val_loss, val_ap = float("nan"), float("nan")
        history.append(
            {"epoch": epoch, "train": train_terms, "val_loss": val_loss, "val_ap": val_ap}
        )

    extras = {"centers": centers.data} if centers is not None else None
    checkpoint = models.Checkpoint(
        arch=config.arch,
        tensors=models.snapshot_tensors(model, extras),
        config=config.to_json(),
        seed=config.seed,
    )
    return TrainResult(checkpoint=checkpoint, history=history)


def write_metrics_log(history, path) -> None:
    """Line-delimited JSON: one record per epoch."""
    path = Path(path)
    with path.open("w") as f:
        for record in history:
            f.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# per-class orchestration
# ---------------------------------------------------------------------------


def class_specific_run(dataset, class_of_interest: int, config: TrainConfig):
    """Build the view/split for one class of interest and train on it.

    The returned checkpoint's config records the original class id; the
    loss itself sees binary labels with positive label 1.  Out-of-domain
    mode discards half of the negative classes (never the positive one)
    before the 80/20 split.
    """
    view = ds.make_class_specific(
        dataset, class_of_interest, out_of_domain=config.out_of_domain, seed=config.seed
    )
    plan = ds.make_splits(dataset, "holdout", seed=config.seed, pool=view.training_pool())
    data = prepare_split_data(dataset, plan, labels=view.binary_labels)
    run_cfg = replace(config, positive_class=1)
    result = train(run_cfg, data)
    result.checkpoint.config["class_of_interest"] = class_of_interest
    result.checkpoint.config["retained_negative_classes"] = view.retained_negative_classes
    return result


def train_all_classes(config: TrainConfig, dataset, classes=None) -> dict:
    """One class-specific model per class of interest."""
    if config.method not in ("binary_rdvae", "csvae"):
        raise TrainingError(f"{config.method} is not a class-specific method")
    if classes is None:
        classes = list(range(dataset.num_classes))
    results = {}
    for cls in classes:
        results[cls] = class_specific_run(dataset, cls, config)
    return results


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    rho_values: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)
    alpha_values: tuple = (0.1, 0.5, 1, 2, 5, 10)

    def __post_init__(self):
        if not self.rho_values or not self.alpha_values:
            raise TrainingError("grid value lists must be non-empty")
        if min(self.rho_values) <= 0 or min(self.alpha_values) <= 0:
            raise TrainingError("grid values must be positive")

    def cells(self, method: str):
        if method == "vae":  # no repulsion term, rho is inert
            return [(None, a) for a in self.alpha_values]
        return list(itertools.product(self.rho_values, self.alpha_values))


@dataclass
class GridResult:
    best_rho: float | None
    best_alpha: float
    best_score: float
    table: list  # (rho | None, alpha, score)


def grid_search(grid: GridSpec, template: TrainConfig, splits: list[SplitData]) -> GridResult:
    """Exhaustive hyperparameter search scored by validation AP.

    ``splits`` holds one entry for holdout protocols and one per fold
    for cross-validation; the cell score is the mean of final-epoch
    validation AP over the entries.  Ties break toward smaller rho,
    then smaller alpha.
    """
    if template.epochs < 1:
        raise TrainingError("grid search needs at least one epoch to score cells")
    table = []
    for rho, alpha in grid.cells(template.method):
        cfg = replace(template, alpha_kl=alpha, rho=(rho if rho is not None else template.rho),
                      track_val_metrics=True)
        scores = []
        for split in splits:
            result = train(cfg, split)
            scores.append(result.history[-1]["val_ap"])
        table.append((rho, alpha, float(np.mean(scores))))
    best = min(table, key=lambda row: (-row[2], row[0] if row[0] is not None else 0.0, row[1]))
    return GridResult(best_rho=best[0], best_alpha=best[1], best_score=best[2], table=table)
