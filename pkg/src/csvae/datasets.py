"""Dataset ingestion, splits, and class-specific relabeling protocols.

Supported on-disk formats: IDX image/label pairs (big endian), CIFAR-10
binary batches (3073-byte records, planar RGB), and directories of
binary PGM ("P5") / PPM ("P6") files with one subdirectory per class.
A loaded dataset can be cached in a little-endian container (magic
``CSVDS1``): header of u32 counts N, C, H, W, K, then K length-prefixed
class names, then raw float32 pixels and uint16 labels.

Loaders are pure functions; a loaded dataset is immutable by convention
and safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CACHE_MAGIC = b"CSVDS1"

CIFAR10_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]


class DatasetError(Exception):
    """Base class for ingestion and protocol failures."""


class FormatError(DatasetError):
    """Malformed file: bad magic, wrong size, undecodable payload."""


class SplitError(DatasetError):
    """A requested split cannot be stratified."""


@dataclass
class LabeledDataset:
    """Images in [0,1] with integer labels in [0, K)."""

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be rank 4 (N,C,H,W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise DatasetError(f"labels outside [0, {k})")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values outside [0, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_be_u32(buf: bytes, offset: int, path) -> int:
    if offset + 4 > len(buf):
        raise FormatError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path, class_names=None) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair; pixels scaled to [0,1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw = images_path.read_bytes()
    if _read_be_u32(raw, 0, images_path) != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad image magic")
    count = _read_be_u32(raw, 4, images_path)
    rows = _read_be_u32(raw, 8, images_path)
    cols = _read_be_u32(raw, 12, images_path)
    if len(raw) != 16 + count * rows * cols:
        raise FormatError(f"{images_path}: truncated pixel payload")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)

    raw_l = labels_path.read_bytes()
    if _read_be_u32(raw_l, 0, labels_path) != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic")
    lcount = _read_be_u32(raw_l, 4, labels_path)
    if lcount != count:
        raise FormatError(f"image count {count} != label count {lcount}")
    if len(raw_l) != 8 + lcount:
        raise FormatError(f"{labels_path}: truncated label payload")
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)

    if class_names is None:
        k = int(labels.max()) + 1 if count else 0
        class_names = [str(i) for i in range(k)]
    return LabeledDataset(
        images=pixels.astype(np.float32) / 255.0,
        labels=labels,
        class_names=list(class_names),
        provenance=f"idx:{images_path}",
    )


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------


def _parse_cifar_records(raw: bytes, path) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    n = len(raw) // CIFAR_RECORD_BYTES
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if n and labels.max() >= 10:
        raise FormatError(f"{path}: label byte {int(labels.max())} out of range")
    images = rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_bin(directory) -> tuple[LabeledDataset, LabeledDataset]:
    """Load CIFAR-10 binary batches; returns (train, test) datasets."""
    directory = Path(directory)
    train_files = sorted(directory.glob("data_batch_*.bin"))
    if not train_files:
        raise FormatError(f"no data_batch_*.bin files under {directory}")
    images, labels = [], []
    for f in train_files:
        im, la = _parse_cifar_records(f.read_bytes(), f)
        images.append(im)
        labels.append(la)
    meta = directory / "batches.meta.txt"
    if meta.exists():
        names = [ln.strip() for ln in meta.read_text().splitlines() if ln.strip()][:10]
        if len(names) < 10:
            names = CIFAR10_CLASS_NAMES
    else:
        names = CIFAR10_CLASS_NAMES
    train = LabeledDataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        class_names=names,
        provenance=f"cifar10:{directory}",
    )
    test_file = directory / "test_batch.bin"
    if test_file.exists():
        im, la = _parse_cifar_records(test_file.read_bytes(), test_file)
    else:
        im = np.zeros((0, 3, 32, 32), dtype=np.float32)
        la = np.zeros(0, dtype=np.int64)
    test = LabeledDataset(im, la, names, provenance=f"cifar10:{test_file}")
    return train, test


# ---------------------------------------------------------------------------
# PGM / PPM directories
# ---------------------------------------------------------------------------


def _parse_netpbm(path: Path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) with maxval 255 -> (C, H, W) float32."""
    raw = path.read_bytes()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1].isspace():
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        return raw[start:pos]

    magic = next_token()
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header and payload
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 1:
        return arr.reshape(1, height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a (C, H, W) image."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[None, :, None]
    wx = (xs - x0).astype(np.float32)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def load_image_dir(root, target_size) -> LabeledDataset:
    """Load a directory of PGM/PPM files, one subdirectory per class.

    Class index is the lexicographic rank of the subdirectory name;
    every image is resized to ``target_size`` (int or (H, W)).
    """
    root = Path(root)
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class subdirectories under {root}")
    images, labels, names = [], [], []
    for idx, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DatasetError(f"empty class directory {cdir}")
        names.append(cdir.name)
        for f in files:
            img = _parse_netpbm(f)
            images.append(bilinear_resize(img, *target_size))
            labels.append(idx)
    channels = {im.shape[0] for im in images}
    if len(channels) != 1:
        raise DatasetError(f"mixed channel counts {sorted(channels)} under {root}")
    return LabeledDataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64),
        class_names=names,
        provenance=f"imagedir:{root}",
    )


# ---------------------------------------------------------------------------
# cache container
# ---------------------------------------------------------------------------


def save_cache(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    n, c, h, w = dataset.images.shape
    k = dataset.num_classes
    parts = [CACHE_MAGIC, struct.pack("<5I", n, c, h, w, k)]
    for name in dataset.class_names:
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
    parts.append(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes())
    path.write_bytes(b"".join(parts))


def load_cache(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad cache magic")
    pos = len(CACHE_MAGIC)
    n, c, h, w, k = struct.unpack_from("<5I", raw, pos)
    pos += 20
    names = []
    for _ in range(k):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        names.append(raw[pos : pos + ln].decode("utf-8"))
        pos += ln
    count = n * c * h * w
    if len(raw) < pos + 4 * count + 2 * n:
        raise FormatError(f"{path}: truncated cache payload")
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(n, c, h, w)
    pos += 4 * count
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=pos).astype(np.int64)
    return LabeledDataset(images.copy(), labels, names, provenance=f"cache:{path}")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """Disjoint index lists over a sample pool; reproducible from the seed."""

    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    fold_id: int | None = None


def make_splits(dataset, mode: str = "holdout", seed: int = 0, *, folds: int = 5,
                val_fraction: float = 0.2, pool=None):
    """Stratified holdout (single plan) or k-fold (list of plans).

    ``pool`` restricts splitting to a subset of sample indices (used by
    the out-of-domain protocol, which discards classes before
    splitting).  Holdout keeps per-class proportions within one sample
    of the requested fraction.
    """
    labels = np.asarray(dataset.labels)
    if pool is None:
        pool = np.arange(len(labels))
    else:
        pool = np.asarray(pool)
    if pool.size == 0:
        raise SplitError("cannot split an empty pool")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels[pool])

    per_class = []
    for cls in classes:
        idx = pool[labels[pool] == cls]
        per_class.append((int(cls), rng.permutation(idx)))

    empty = np.array([], dtype=np.int64)
    if mode == "holdout":
        train, val = [], []
        for _, idx in per_class:
            n_val = int(round(len(idx) * val_fraction))
            val.append(idx[:n_val])
            train.append(idx[n_val:])
        return SplitPlan(
            train_indices=np.sort(np.concatenate(train)),
            val_indices=np.sort(np.concatenate(val)),
            test_indices=empty,
            seed=seed,
        )
    if mode == "kfold":
        fold_members = [[] for _ in range(folds)]
        for rank, (_, idx) in enumerate(per_class):
            if len(idx) < folds:
                raise SplitError(
                    f"class with {len(idx)} samples cannot be split into {folds} folds"
                )
            chunks = np.array_split(idx, folds)
            # rotate so the larger leading chunks land on different folds per class
            for j, chunk in enumerate(chunks):
                fold_members[(j + rank) % folds].append(chunk)
        plans = []
        for f in range(folds):
            val = np.sort(np.concatenate(fold_members[f]))
            train = np.sort(np.setdiff1d(pool, val))
            plans.append(SplitPlan(train, val, empty, seed=seed, fold_id=f))
        return plans
    raise ValueError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------------------
# class-specific views
# ---------------------------------------------------------------------------


@dataclass
class ClassSpecificView:
    """Binary relabeling of a dataset around one positive class.

    For out-of-domain training, only ``retained_negative_classes`` may
    appear in the training pool; the positive class is never discarded
    and test-time evaluation always sees every class.
    """

    base: LabeledDataset
    positive_class: int
    binary_labels: np.ndarray
    retained_negative_classes: list[int] = field(default_factory=list)

    def training_pool(self) -> np.ndarray:
        keep = set(self.retained_negative_classes) | {self.positive_class}
        mask = np.isin(self.base.labels, sorted(keep))
        return np.nonzero(mask)[0]


def make_class_specific(dataset, positive_class: int, out_of_domain: bool = False,
                        seed: int = 0) -> ClassSpecificView:
    """Build the binary view for one class of interest.

    Out-of-domain mode retains exactly floor((K-1)/2) negative classes,
    chosen uniformly at random from the given seed, before any
    train/validation splitting happens.
    """
    k = dataset.num_classes
    if k < 2:
        raise DatasetError(f"need at least 2 classes, got {k}")
    if not (0 <= positive_class < k):
        raise DatasetError(f"positive class {positive_class} outside [0, {k})")
    negatives = [c for c in range(k) if c != positive_class]
    if out_of_domain:
        rng = np.random.default_rng(seed)
        n_keep = (k - 1) // 2
        retained = sorted(rng.choice(negatives, size=n_keep, replace=False).tolist())
    else:
        retained = negatives
    binary = (dataset.labels == positive_class).astype(np.int64)
    return ClassSpecificView(
        base=dataset,
        positive_class=positive_class,
        binary_labels=binary,
        retained_negative_classes=retained,
    )
