"""Training objectives: reconstruction, latent divergences, repulsion.

All functions are pure and differentiable through the numeric core.
Conventions (they keep the hyperparameter grids meaningful at any batch
size):

- reconstruction: mean squared error over all pixels of the batch;
- divergence terms: per-sample sum over latent dimensions, then mean
  over the governed samples;
- repulsion between class centers: one term per unordered pair of
  distinct classes present in the batch;
- repulsion of negatives from the positive center: mean over negative
  samples.

Log standard deviations are clamped to [-10, 10] before exponentiation
as an overflow guard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ShapeError, Tensor

METHODS = ("vae", "rdvae", "binary_rdvae", "csvae")

LOG_SIGMA_CLAMP = 10.0


class LossError(Exception):
    """Inconsistent loss inputs (missing centers, unset positive class, ...)."""


@dataclass(frozen=True)
class LossConfig:
    method: str
    alpha_kl: float
    rho: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise LossError(f"unknown method {self.method!r}")
        if self.alpha_kl <= 0:
            raise LossError(f"alpha_kl must be positive, got {self.alpha_kl}")
        if self.rho <= 0:
            raise LossError(f"rho must be positive, got {self.rho}")


@dataclass
class BatchLatents:
    """Latent view of one minibatch.

    ``sigma`` is exp of the (clamped) log-sigma head output, so it is
    positive by construction.  ``centers`` is the learnable per-class
    mean matrix; row count must cover every label.
    """

    mu: Tensor  # (B, d)
    sigma: Tensor  # (B, d)
    labels: np.ndarray  # (B,) ints
    centers: Tensor | None = None  # (K, d)
    positive_class: int | None = None

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu {self.mu.shape} vs sigma {self.sigma.shape}")
        if len(self.labels) != self.mu.shape[0]:
            raise ShapeError(f"{len(self.labels)} labels for batch of {self.mu.shape[0]}")
        if np.any(self.sigma.data <= 0):
            raise LossError("sigma must be positive")
        if self.centers is not None and len(self.labels) and self.labels.max() >= self.centers.shape[0]:
            raise LossError(
                f"label {int(self.labels.max())} has no center row (centers: {self.centers.shape[0]})"
            )


def make_batch_latents(mu, log_sigma, labels, centers=None, positive_class=None) -> BatchLatents:
    """Clamp/exponentiate the log-sigma head and bundle the batch view."""
    sigma = dm.exp(dm.clamp(log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
    return BatchLatents(
        mu=mu,
        sigma=sigma,
        labels=np.asarray(labels),
        centers=centers,
        positive_class=positive_class,
    )


def mse_loss(reconstruction: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of the per-sample mean squared pixel error."""
    if reconstruction.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {reconstruction.shape} vs {target.shape}")
    diff = reconstruction - target
    return dm.tmean(diff * diff)


def _divergence_elements(mu: Tensor, sigma: Tensor) -> Tensor:
    # per element: mu^2 + sigma^2 - log(sigma) - 1
    return mu * mu + sigma * sigma - dm.log(sigma) - 1.0


def kld_unsup(latents: BatchLatents) -> Tensor:
    """Divergence of each latent Gaussian from the zero-mean unit prior."""
    per = _divergence_elements(latents.mu, latents.sigma)
    return dm.tmean(dm.tsum(per, axis=1))


def kld_sup(latents: BatchLatents) -> Tensor:
    """Divergence of each latent Gaussian from its own class center."""
    if latents.centers is None:
        raise LossError("kld_sup needs class centers")
    c = dm.index_rows(latents.centers, latents.labels)
    diff = latents.mu - c
    per = diff * diff + latents.sigma * latents.sigma - dm.log(latents.sigma) - 1.0
    return dm.tmean(dm.tsum(per, axis=1))


def rep_loss(centers: Tensor, labels_present, rho: float) -> Tensor:
    """Hinge-squared repulsion between centers of classes in the batch.

    One term per unordered pair of distinct classes; zero once every
    pairwise squared distance reaches ``rho``.
    """
    labs = np.unique(np.asarray(labels_present))
    if labs.size < 2:
        return Tensor(np.zeros((), dtype=centers.dtype))
    ia, ib = np.triu_indices(labs.size, k=1)
    ca = dm.index_rows(centers, labs[ia])
    cb = dm.index_rows(centers, labs[ib])
    diff = ca - cb
    sq = dm.tsum(diff * diff, axis=1)
    hinge = dm.relu(float(rho) - sq)
    return dm.tsum(hinge * hinge) * (1.0 / float(rho))


def kld_sup_cs(latents: BatchLatents) -> Tensor:
    """Divergence of positive-class latents from the positive center.

    Mean over the positive samples in the batch; batches with no
    positives contribute zero.
    """
    if latents.positive_class is None:
        raise LossError("kld_sup_cs needs positive_class")
    if latents.centers is None:
        raise LossError("kld_sup_cs needs class centers")
    idx = np.nonzero(latents.labels == latents.positive_class)[0]
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=latents.mu.dtype))
    mu_p = dm.index_rows(latents.mu, idx)
    sig_p = dm.index_rows(latents.sigma, idx)
    c_p = dm.index_rows(latents.centers, np.array([latents.positive_class]))
    diff = mu_p - c_p
    per = diff * diff + sig_p * sig_p - dm.log(sig_p) - 1.0
    return dm.tmean(dm.tsum(per, axis=1))


def rep_loss_cs(latents: BatchLatents, rho: float) -> Tensor:
    """Hinge-squared push of negative latent means away from the positive center.

    Mean over negative samples; each term lies in [0, rho] and vanishes
    once the squared distance reaches ``rho``.
    """
    if latents.positive_class is None:
        raise LossError("rep_loss_cs needs positive_class")
    if latents.centers is None:
        raise LossError("rep_loss_cs needs class centers")
    idx = np.nonzero(latents.labels != latents.positive_class)[0]
    if idx.size == 0:
        return Tensor(np.zeros((), dtype=latents.mu.dtype))
    mu_n = dm.index_rows(latents.mu, idx)
    c_p = dm.index_rows(latents.centers, np.array([latents.positive_class]))
    diff = mu_n - c_p
    sq = dm.tsum(diff * diff, axis=1)
    hinge = dm.relu(float(rho) - sq)
    return dm.tmean(hinge * hinge) * (1.0 / float(rho))


def total_loss(config: LossConfig, reconstruction, target, latents) -> tuple[Tensor, dict]:
    """Assemble the method's objective; returns (scalar tensor, term values)."""
    mse = mse_loss(reconstruction, target)
    if config.method == "vae":
        kld = kld_unsup(latents)
        total = mse + config.alpha_kl * kld
        parts = {"mse": mse.item(), "kld": kld.item()}
    elif config.method in ("rdvae", "binary_rdvae"):
        kld = kld_sup(latents)
        rep = rep_loss(latents.centers, latents.labels, config.rho)
        total = mse + config.alpha_kl * kld + rep
        parts = {"mse": mse.item(), "kld": kld.item(), "rep": rep.item()}
    else:  # csvae
        kld = kld_sup_cs(latents)
        rep = rep_loss_cs(latents, config.rho)
        total = mse + config.alpha_kl * kld + rep
        parts = {"mse": mse.item(), "kld": kld.item(), "rep": rep.item()}
    parts["total"] = total.item()
    return total, parts
