"""Dataset ingestion (IDX format), semi-supervised splitting, and synthetic
tabular datasets for verification.

Images come back flattened to length-784 float vectors scaled to [0, 1];
gray values are kept as-is (binary cross-entropy targets, no stochastic
binarization).
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ContractError, FormatError, LengthError

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    features: np.ndarray              # [N, D] float64 in [0, 1]
    labels: np.ndarray | None = None  # [N] int64 class indices
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError(f"features must be [N, D], got {self.features.shape}")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise ContractError("features must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.features):
                raise LengthError(
                    f"{len(self.labels)} labels for {len(self.features)} items")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray, keep_labels: bool = True) -> "Dataset":
        labels = self.labels[idx] if (keep_labels and self.labels is not None) else None
        return Dataset(self.features[idx], labels, self.image_shape)


@dataclass
class SemiSplit:
    supervised: Dataset       # size M, with labels
    unsupervised: Dataset     # size N, labels discarded
    seed: int
    supervised_indices: np.ndarray
    unsupervised_indices: np.ndarray


# ---------------------------------------------------------------------------
# IDX files

def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expect_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise LengthError(f"{path}: too short for a magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise LengthError(f"{path}: header promises {count} bytes, "
                          f"file carries {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset (pixels / 255)."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    n = images.shape[0]
    if labels.shape[0] != n:
        raise LengthError(f"{labels_path}: {labels.shape[0]} labels for {n} images")
    rows, cols = images.shape[1], images.shape[2]
    feats = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), image_shape=(rows, cols))


def serialize_idx_images(ds: Dataset) -> bytes:
    """Inverse of the image half of load_idx (byte-exact round trip)."""
    if ds.image_shape is None:
        raise ContractError("dataset carries no image shape")
    r, c = ds.image_shape
    pix = np.rint(ds.features * 255.0).astype(np.uint8).reshape(len(ds), r, c)
    return struct.pack(">IIII", IMAGES_MAGIC, len(ds), r, c) + pix.tobytes()


def serialize_idx_labels(ds: Dataset) -> bytes:
    if ds.labels is None:
        raise ContractError("dataset carries no labels")
    return struct.pack(">II", LABELS_MAGIC, len(ds)) + \
        ds.labels.astype(np.uint8).tobytes()


def resolve_data_dir(explicit=None) -> str:
    """CLI flag wins; otherwise the SGVAE_DATA_DIR environment variable."""
    path = explicit or os.environ.get("SGVAE_DATA_DIR")
    if not path:
        raise ContractError("no data directory: pass --data-dir or set SGVAE_DATA_DIR")
    return path


def load_mnist(data_dir, split: str = "train") -> Dataset:
    images_name, labels_name = MNIST_FILES[split]

    def find(name):
        for candidate in (os.path.join(data_dir, name),
                          os.path.join(data_dir, name + ".gz")):
            if os.path.exists(candidate):
                return candidate
        raise FileNotFoundError(f"{name}[.gz] not found under {data_dir}")

    return load_idx(find(images_name), find(labels_name))


# ---------------------------------------------------------------------------
# splits

def holdout_split(ds: Dataset, n_holdout: int, seed: int) -> tuple[Dataset, Dataset]:
    """Carve a seeded holdout (e.g. a validation slice) off a dataset."""
    if n_holdout > len(ds):
        raise CapacityError(f"holdout {n_holdout} exceeds dataset size {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[n_holdout:]), ds.subset(order[:n_holdout])


def split_semi_supervised(ds: Dataset, m: int, seed: int,
                          n_unsup: int | None = None) -> SemiSplit:
    """Class-balanced supervised subset of size m; the rest (optionally capped
    at n_unsup) becomes the unsupervised set with labels stripped."""
    if ds.labels is None:
        raise ContractError("splitting needs labels")
    if m > len(ds):
        raise CapacityError(f"m={m} exceeds dataset size {len(ds)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    classes = np.unique(ds.labels)
    per_class = m // len(classes) if len(classes) else 0
    balanced = m > 0 and per_class * len(classes) == m and all(
        np.sum(ds.labels == c) >= per_class for c in classes)
    if balanced:
        chosen: list[np.ndarray] = []
        shuffled_labels = ds.labels[order]
        for c in classes:
            chosen.append(order[np.flatnonzero(shuffled_labels == c)[:per_class]])
        sup_idx = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=int)
    else:
        if m > 0:
            log.warning("m=%d not class-balanced over %d classes; "
                        "falling back to proportional sampling", m, len(classes))
        sup_idx = np.sort(order[:m])
    sup_set = set(sup_idx.tolist())
    unsup_idx = np.array([i for i in order if i not in sup_set], dtype=int)
    if n_unsup is not None:
        if n_unsup > len(unsup_idx):
            raise CapacityError(f"n_unsup={n_unsup} exceeds the {len(unsup_idx)} "
                                "remaining items")
        unsup_idx = unsup_idx[:n_unsup]
    unsup_idx = np.sort(unsup_idx)
    return SemiSplit(supervised=ds.subset(sup_idx),
                     unsupervised=ds.subset(unsup_idx, keep_labels=False),
                     seed=seed, supervised_indices=sup_idx,
                     unsupervised_indices=unsup_idx)


# ---------------------------------------------------------------------------
# synthetic data from tabular models

def synth_tabular_dataset(model, n: int, seed: int) -> Dataset:
    """n ancestral draws from a tabular model's generative tables.

    Features are the concatenated one-hots of the observed variables; labels
    are the values of the partial variable when there is exactly one.
    """
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    for v in model.variables:  # declaration order is a generative topo order
        parents, table = model.gen_factors[v.name]
        rows = table[tuple(values[p] for p in parents)] if parents \
            else np.broadcast_to(table, (n, table.shape[-1]))
        if n == 0:
            values[v.name] = np.zeros(0, dtype=np.int64)
            continue
        cdf = np.cumsum(rows, axis=1)
        u = rng.random((n, 1)) * cdf[:, -1:]
        values[v.name] = (u > cdf[:, :-1]).sum(axis=1) if rows.shape[1] > 1 \
            else np.zeros(n, dtype=np.int64)
    blocks = []
    for name in model.observed:
        dom = model.var(name).domain
        block = np.zeros((n, dom))
        if n:
            block[np.arange(n), values[name]] = 1.0
        blocks.append(block)
    feats = np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0))
    labels = values[model.partial[0]] if len(model.partial) == 1 else None
    return Dataset(feats, labels)
