"""PCA projection of latent embeddings for visualization export.

The covariance eigendecomposition runs as power iteration with
deflation (the covariance here is at most latent_dim x latent_dim, so
no external solver is warranted).  Components are re-orthogonalized
against the ones already found on every iteration, which keeps the
basis orthonormal even for clustered eigenvalues.  Sign convention:
the largest-magnitude coordinate of each component is positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PcaError(Exception):
    """PCA preconditions violated (too few samples, zero variance, ...)."""


@dataclass
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d), orthonormal rows, by descending eigenvalue
    eigenvalues: np.ndarray  # (k,), non-negative, descending


def _as_matrix(embeddings) -> np.ndarray:
    vectors = getattr(embeddings, "vectors", embeddings)
    return np.asarray(vectors, dtype=np.float64)


def _orthogonal_start(found: list, d: int, rng) -> np.ndarray:
    for _ in range(50):
        v = rng.standard_normal(d)
        for prev in found:
            v -= (v @ prev) * prev
        norm = np.linalg.norm(v)
        if norm > 1e-3:
            return v / norm
    raise PcaError("cannot initialize a direction orthogonal to found components")


def _power_iterate(cov: np.ndarray, found: list, tol: float, max_iter: int = 100000):
    d = cov.shape[0]
    rng = np.random.default_rng(len(found))  # fixed per-component stream: deterministic fits
    v = _orthogonal_start(found, d, rng)
    lam = float(v @ cov @ v)
    for _ in range(max_iter):
        w = cov @ v
        for prev in found:
            w -= (w @ prev) * prev
        norm = np.linalg.norm(w)
        if norm < tol:
            # deflated covariance is (numerically) zero along every
            # remaining direction; v spans the null space, eigenvalue 0
            return 0.0, v
        w /= norm
        lam_new = float(w @ cov @ w)
        if np.linalg.norm(w - v * np.sign(w @ v)) <= tol and abs(lam_new - lam) <= tol * max(1.0, abs(lam)):
            v, lam = w, lam_new
            break
        v, lam = w, lam_new
    return lam, v


def pca_fit(embeddings, k: int, tol: float = 1e-10) -> PcaModel:
    """Top-k eigenpairs of the sample covariance (1/(N-1) estimator)."""
    x = _as_matrix(embeddings)
    n, d = x.shape
    if not (1 <= k <= d):
        raise PcaError(f"k must be in [1, {d}], got {k}")
    if n <= k:
        raise PcaError(f"need more samples than components: N={n}, k={k}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / (n - 1)
    if float(np.trace(cov)) <= tol:
        raise PcaError("zero-variance data: all embedding vectors are identical")

    components: list[np.ndarray] = []
    eigenvalues = []
    work = cov.copy()
    for _ in range(k):
        lam, v = _power_iterate(work, components, tol)
        if np.abs(v).max() > 0 and v[np.argmax(np.abs(v))] < 0:
            v = -v
        components.append(v)
        eigenvalues.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)

    comp = np.stack(components)
    eig = np.array(eigenvalues)
    order = np.argsort(-eig, kind="stable")  # deflation can reorder near-ties
    return PcaModel(mean=mean, components=comp[order], eigenvalues=eig[order])


def pca_project(model: PcaModel, embeddings) -> np.ndarray:
    """Coordinates of the embeddings in the component basis: (N, k)."""
    x = _as_matrix(embeddings)
    if x.shape[1] != model.mean.shape[0]:
        raise PcaError(f"dim mismatch: vectors are {x.shape[1]}-d, model is {model.mean.shape[0]}-d")
    return (x - model.mean) @ model.components.T


def export_projection(model: PcaModel, embeddings, path) -> np.ndarray:
    """Project an embedding set and write ``id,label,pc1..pck`` CSV rows."""
    coords = pca_project(model, embeddings)
    k = coords.shape[1]
    header = "id,label," + ",".join(f"pc{j + 1}" for j in range(k))
    lines = [header]
    for i in range(len(coords)):
        vals = ",".join(repr(float(v)) for v in coords[i])
        lines.append(f"{embeddings.ids[i]},{embeddings.labels[i]},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")
    return coords
