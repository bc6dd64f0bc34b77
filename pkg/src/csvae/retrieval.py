"""Latent-space retrieval and the interpolated average-precision pipeline.

Retrieval ranks database items by squared Euclidean distance between
latent mean vectors (the geometry the repulsive losses shape), ties
broken by ascending id.  Evaluation follows the leave-query-out
convention: every test image of the evaluated class queries the rest of
the test set, relevance is class membership, per-class AP is the mean
over queries, and mAP the unweighted mean over classes.  AP is the
11-point interpolated variant: the average over recall levels
{0.0, 0.1, ..., 1.0} of the maximum precision at any achieved recall at
or above the level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import models
from .diffmath import ShapeError


class MetricError(Exception):
    """Undefined metric request (no relevant items, missing class, ...)."""


class EvalError(Exception):
    """Evaluation cannot proceed (missing checkpoint, absent class, ...)."""


RECALL_LEVELS = 11  # 0.0, 0.1, ..., 1.0


@dataclass
class EmbeddingSet:
    """Retrieval database: one latent mean vector per sample."""

    ids: np.ndarray  # (N,) int64
    labels: np.ndarray  # (N,) int64
    vectors: np.ndarray  # (N, d) float32
    checkpoint_id: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if not (len(self.ids) == len(self.labels) == len(self.vectors)):
            raise ValueError("ids, labels, vectors must have equal length")
        if len(self.vectors) and not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] if self.vectors.ndim == 2 else 0


def embed_dataset(model_or_checkpoint, images, labels, ids=None, *,
                  batch_size: int = 256, checkpoint_id: str = "") -> EmbeddingSet:
    """Eval-mode encoder pass over a split; vectors are the latent means."""
    if isinstance(model_or_checkpoint, models.Checkpoint):
        checkpoint_id = checkpoint_id or models.checkpoint_digest(model_or_checkpoint)[:16]
        model = models.model_from_checkpoint(model_or_checkpoint)
    else:
        model = model_or_checkpoint
    model.eval()
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if ids is None:
        ids = np.arange(len(images), dtype=np.int64)
    if len(images) == 0:
        return EmbeddingSet(np.array([], dtype=np.int64), labels,
                            np.zeros((0, model.arch.latent_dim), dtype=np.float32),
                            checkpoint_id)
    if tuple(images.shape[1:]) != tuple(model.arch.input_shape):
        raise ShapeError(
            f"dataset shape {tuple(images.shape[1:])} != model input {tuple(model.arch.input_shape)}"
        )
    chunks = []
    with dm.no_grad():
        for start in range(0, len(images), batch_size):
            mu, _ = model.encode_tensors(dm.Tensor(images[start : start + batch_size]))
            chunks.append(mu.data.astype(np.float32))
    return EmbeddingSet(ids, labels, np.concatenate(chunks), checkpoint_id)


def rank(query: np.ndarray, database: EmbeddingSet, exclude_id=None) -> list:
    """Order the database by ascending squared distance, ties by ascending id."""
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    if query.shape[0] != database.dim:
        raise ShapeError(f"query dim {query.shape[0]} != database dim {database.dim}")
    d2 = np.sum((database.vectors - query) ** 2, axis=1)
    order = np.lexsort((database.ids, d2))
    out = []
    for i in order:
        if exclude_id is not None and database.ids[i] == exclude_id:
            continue
        out.append((int(database.ids[i]), float(d2[i])))
    return out


def ap_11point(relevance, total_relevant=None) -> float:
    """11-point interpolated average precision of a ranked relevance list.

    ``total_relevant`` defaults to the number of positive flags; pass it
    explicitly when the ranking is truncated.  Recall comparisons are
    done in integers, so recall levels are exact.
    """
    flags = np.asarray(relevance, dtype=np.int64)
    r = int(flags.sum()) if total_relevant is None else int(total_relevant)
    if r < 1:
        raise MetricError("average precision needs at least one relevant item")
    cum = np.cumsum(flags)
    prec = cum / np.arange(1, len(flags) + 1)
    p_interp = np.maximum.accumulate(prec[::-1])[::-1]
    total = 0.0
    for level in range(RECALL_LEVELS):
        achieved = np.nonzero(10 * cum >= level * r)[0]
        if achieved.size:
            total += p_interp[achieved[0]]
    return total / RECALL_LEVELS


def _ap_rows(rel: np.ndarray, total_relevant: np.ndarray) -> np.ndarray:
    """Vectorized ap_11point over rows of an already-ranked relevance matrix."""
    q, n = rel.shape
    cum = np.cumsum(rel, axis=1)
    prec = cum / np.arange(1, n + 1)
    p_interp = np.maximum.accumulate(prec[:, ::-1], axis=1)[:, ::-1]
    total = np.zeros(q)
    for level in range(RECALL_LEVELS):
        mask = 10 * cum >= level * total_relevant[:, None]
        any_row = mask.any(axis=1)
        first = mask.argmax(axis=1)
        vals = np.take_along_axis(p_interp, first[:, None], axis=1)[:, 0]
        total += np.where(any_row, vals, 0.0)
    return total / RECALL_LEVELS


def class_average_precision(embeddings: EmbeddingSet, class_id: int, *,
                            query_chunk: int = 512) -> float:
    """Mean leave-query-out AP over all queries of one class."""
    order = np.argsort(embeddings.ids, kind="stable")
    ids = embeddings.ids[order]
    labels = embeddings.labels[order]
    vectors = embeddings.vectors[order].astype(np.float64)

    members = np.nonzero(labels == class_id)[0]
    if members.size == 0:
        raise EvalError(f"class {class_id} absent from the embedding set")
    if members.size < 2:
        raise MetricError(f"class {class_id} has a single sample; no relevant items remain")

    rel_all = (labels == class_id).astype(np.int64)
    sq_norm = np.sum(vectors * vectors, axis=1)
    total_relevant = np.full(members.size, members.size - 1)

    aps = np.zeros(members.size)
    for start in range(0, members.size, query_chunk):
        qidx = members[start : start + query_chunk]
        qv = vectors[qidx]
        d2 = sq_norm[qidx][:, None] + sq_norm[None, :] - 2.0 * (qv @ vectors.T)
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(len(qidx)), qidx] = np.inf  # exclude the query itself
        rows = np.argsort(d2, axis=1, kind="stable")  # ids ascend, so ties break by id
        rel = rel_all[rows]
        rel[np.arange(len(qidx)), -1] = 0  # the excluded query sorted last
        aps[start : start + len(qidx)] = _ap_rows(rel, total_relevant[start : start + len(qidx)])
    return float(aps.mean())


def mean_average_precision(embeddings: EmbeddingSet, classes=None, *,
                           skip_singletons: bool = False) -> float:
    """Unweighted mean of per-class APs over ``classes`` (default: all present)."""
    if classes is None:
        classes = np.unique(embeddings.labels)
    aps = []
    for cls in classes:
        try:
            aps.append(class_average_precision(embeddings, int(cls)))
        except MetricError:
            if not skip_singletons:
                raise
    if not aps:
        raise MetricError("no class with enough samples to evaluate")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-class AP and mAP in percent, mean and std over repeated seeds."""

    method: str
    protocol: str
    per_class_ap: dict  # class -> (mean, std)
    map: tuple  # (mean, std)
    per_seed_map: dict = field(default_factory=dict)  # seed -> mAP
    per_class_by_seed: dict = field(default_factory=dict)  # class -> {seed: ap}


def evaluate(method: str, checkpoints: dict, test_images, test_labels, *,
             protocol: str = "in_domain", batch_size: int = 256) -> EvalReport:
    """Score a method over repeated seeds on a held-out test split.

    ``checkpoints`` maps ``seed -> Checkpoint`` for the multi-class
    methods (one shared model) and ``seed -> {class: Checkpoint}`` for
    the class-specific ones (one model per class of interest).
    """
    test_labels = np.asarray(test_labels, dtype=np.int64)
    seeds = sorted(checkpoints)
    if not seeds:
        raise EvalError("no checkpoints supplied")
    class_specific = method in ("binary_rdvae", "csvae")
    if class_specific:
        classes = sorted({c for seed in seeds for c in checkpoints[seed]})
    else:
        classes = [int(c) for c in np.unique(test_labels)]

    per_class_by_seed: dict = {cls: {} for cls in classes}
    per_seed_map = {}
    for seed in seeds:
        seed_aps = []
        if class_specific:
            per_class = checkpoints[seed]
            for cls in classes:
                if cls not in per_class:
                    raise EvalError(f"missing checkpoint for class {cls}, seed {seed}")
                emb = embed_dataset(per_class[cls], test_images, test_labels,
                                    batch_size=batch_size)
                ap = class_average_precision(emb, cls)
                per_class_by_seed[cls][seed] = 100.0 * ap
                seed_aps.append(100.0 * ap)
        else:
            emb = embed_dataset(checkpoints[seed], test_images, test_labels,
                                batch_size=batch_size)
            for cls in classes:
                ap = class_average_precision(emb, cls)
                per_class_by_seed[cls][seed] = 100.0 * ap
                seed_aps.append(100.0 * ap)
        per_seed_map[seed] = float(np.mean(seed_aps))

    per_class_ap = {
        cls: (float(np.mean(list(v.values()))), float(np.std(list(v.values()))))
        for cls, v in per_class_by_seed.items()
    }
    maps = np.array([per_seed_map[s] for s in seeds])
    return EvalReport(
        method=method,
        protocol=protocol,
        per_class_ap=per_class_ap,
        map=(float(maps.mean()), float(maps.std())),
        per_seed_map=per_seed_map,
        per_class_by_seed=per_class_by_seed,
    )


def report_table(reports: list[EvalReport], class_names=None) -> str:
    """CSV table: one row per class plus a Mean row, one column per method."""
    methods = [r.method for r in reports]
    classes = sorted({c for r in reports for c in r.per_class_ap})
    lines = ["class," + ",".join(methods)]
    for cls in classes:
        name = class_names[cls] if class_names else f"C{cls + 1}"
        cells = []
        for r in reports:
            if cls in r.per_class_ap:
                m, s = r.per_class_ap[cls]
                cells.append(f"{m:.2f}±{s:.2f}")
            else:
                cells.append("")
        lines.append(f"{name}," + ",".join(cells))
    mean_cells = [f"{r.map[0]:.2f}±{r.map[1]:.2f}" for r in reports]
    lines.append("Mean," + ",".join(mean_cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# embedding file format
# ---------------------------------------------------------------------------


def save_embeddings(embeddings: EmbeddingSet, path) -> None:
    """Write the CSV embedding file: header ``id,label,dim=<d>`` then rows."""
    path = Path(path)
    lines = [f"id,label,dim={embeddings.dim}"]
    for i in range(len(embeddings)):
        vals = ",".join(repr(float(v)) for v in embeddings.vectors[i])
        lines.append(f"{embeddings.ids[i]},{embeddings.labels[i]},{vals}")
    path.write_text("\n".join(lines) + "\n")


def load_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("id,label,dim="):
        raise ValueError(f"{path}: not an embedding file")
    dim = int(lines[0].split("dim=")[1])
    ids, labels, vectors = [], [], []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        ids.append(int(parts[0]))
        labels.append(int(parts[1]))
        vectors.append([np.float32(float(v)) for v in parts[2 : 2 + dim]])
    vec = np.array(vectors, dtype=np.float32) if vectors else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingSet(np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64), vec)
